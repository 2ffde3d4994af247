//! Rectangular min-cost assignment on a small cost matrix, plus the effect
//! of each pairing strategy on a similarity matrix.

use mixpipe::assign::{hungarian_assign, CostMatrix};
use mixpipe::rng::{stage_rng, Stage};
use mixpipe::sampler::{strategy_cost, PairingStrategy};
use mixpipe::similarity::SimilarityMatrix;

fn main() -> mixpipe::Result<()> {
    let cost = CostMatrix::from_rows(&[
        vec![4.0, 1.0, 3.0, 9.0],
        vec![2.0, 0.0, 5.0, 7.0],
        vec![3.0, 2.0, 2.0, 1.0],
    ])?;
    let a = hungarian_assign(&cost)?;
    println!("rows -> columns {:?}, total cost {}", a.columns, a.total);

    // Three multi-camera pids against five single-camera candidates.
    let s = SimilarityMatrix::from_vec(
        3,
        5,
        vec![
            0.9, 0.1, 0.4, 0.6, 0.2, //
            0.3, 0.8, 0.5, 0.1, 0.7, //
            0.2, 0.6, 0.9, 0.4, 0.3,
        ],
    );
    let mut rng = stage_rng(0, Stage::Sampler);
    for strategy in PairingStrategy::ALL {
        let a = hungarian_assign(&strategy_cost(&s, strategy, &mut rng)?)?;
        let sims: Vec<f64> = a.columns.iter().enumerate().map(|(i, &j)| s.get(i, j)).collect();
        println!("{:<7} columns {:?} similarities {:?}", strategy.name(), a.columns, sims);
    }
    Ok(())
}
