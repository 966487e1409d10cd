//! Which frame of a delayed sensor is closest to a requested offset.

use bevsync::scenesim::{nearest_frame, Modality, SensorStream};

fn main() -> bevsync::Result<()> {
    let lidar = SensorStream::new("lidar", 20.0, 0.0, Modality::Lidar)?;
    let camera = SensorStream::new("camera", 12.0, 0.0, Modality::Camera)?;
    let t_ref = 0.5;
    println!("{:>8} {:>12} {:>12}", "offset", "lidar dt", "camera dt");
    for k in 0..=10 {
        let offset = k as f64 * 0.05;
        let l = t_ref - nearest_frame(&lidar, t_ref, offset);
        let c = t_ref - nearest_frame(&camera, t_ref, offset);
        println!("{offset:>8.3} {l:>12.4} {c:>12.4}");
    }
    Ok(())
}
