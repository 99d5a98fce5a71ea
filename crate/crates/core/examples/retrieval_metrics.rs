//! Ranking, average precision and CMC on a hand-sized retrieval problem.

use anet::eval::{rank_and_score, Labels};
use anet::numerics::Tensor;

fn main() -> anyhow::Result<()> {
    // One query at the origin; gallery at distances 1, 2 and 3.
    let query = Tensor::new(&[1, 1], vec![0.0]);
    let gallery = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]);
    let r = rank_and_score(
        &query,
        Labels { ids: &[7], cams: &[0] },
        &gallery,
        Labels { ids: &[7, 3, 7], cams: &[1, 1, 2] },
        true,
    )?;
    // Hits at ranks 1 and 3: AP = (1/1 + 2/3) / 2.
    println!("AP {:.4} (expected {:.4})", r.map, (1.0 + 2.0 / 3.0) / 2.0);
    println!("CMC {:?}", r.cmc);
    println!("{}", r.to_json()?);
    Ok(())
}
