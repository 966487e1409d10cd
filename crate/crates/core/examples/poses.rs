//! SE(2) poses, oriented boxes and their footprint on a BEV grid.

use bevsync::geometry::{points_in_box, BevGridSpec, Box2, Point2, Pose2};
use std::f64::consts::FRAC_PI_2;

fn main() -> bevsync::Result<()> {
    let ego = Pose2::new(10.0, 5.0, FRAC_PI_2);
    let obj_in_ego = Pose2::new(4.0, 0.0, 0.0);
    let obj_world = ego.compose(&obj_in_ego);
    println!("object in world: {obj_world:?}");
    println!("back in ego:     {:?}", ego.inverse().compose(&obj_world));

    let p = Point2::new(1.0, 0.0);
    println!("{p:?} in ego frame -> {:?} in world", ego.apply(p));

    let grid = BevGridSpec::centered(16, 0.5)?;
    let bx = Box2::new(Pose2::new(0.3, -0.4, 0.6), 3.0, 1.2)?;
    let cells = points_in_box(&bx, &grid);
    println!("box covers {} cells", cells.len());
    for r in (0..grid.height).rev() {
        let line: String = (0..grid.width)
            .map(|c| {
                if cells.iter().any(|i| i.row == r && i.col == c) {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
