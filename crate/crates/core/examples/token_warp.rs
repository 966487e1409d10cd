//! Corrects sparse token positions with forward ego and object flow.

use bevsync::geometry::{BevGridSpec, Point2, Pose2};
use bevsync::gtflow::{dense_gt_flow, emc_flow, FlowDirection};
use bevsync::scenesim::{BoxTrack, EgoTrajectory};
use bevsync::warp::{warp_tokens, Token, TokenSet};

fn main() -> bevsync::Result<()> {
    let grid = BevGridSpec::centered(64, 0.5)?;
    let ego = EgoTrajectory::constant(Pose2::IDENTITY, 2.0, 0.0);
    let tracks = vec![BoxTrack {
        id: 0,
        length: 4.0,
        width: 1.8,
        initial: Pose2::new(5.0, 3.0, 0.0),
        speed_mps: 3.0,
        yaw_rate_radps: 0.0,
    }];
    let (t0, t1) = (0.0, 0.5);
    let emc = emc_flow(&ego.pose_at(t0), &ego.pose_at(t1), &grid, FlowDirection::Forward);
    let dynamic = dense_gt_flow(&tracks, t0, t1, &ego, &grid);

    let tokens = TokenSet::new(vec![
        Token { coord: Point2::new(5.1, 3.2), payload_id: 1 },
        Token { coord: Point2::new(-4.0, 2.0), payload_id: 2 },
        Token { coord: Point2::new(40.0, 0.0), payload_id: 3 },
    ]);
    let moved = warp_tokens(&tokens, &emc, &dynamic)?;
    for (a, b) in tokens.tokens.iter().zip(&moved.tokens) {
        println!("token {}: ({:.2}, {:.2}) -> ({:.2}, {:.2})", a.payload_id, a.coord.x, a.coord.y, b.coord.x, b.coord.y);
    }
    Ok(())
}
