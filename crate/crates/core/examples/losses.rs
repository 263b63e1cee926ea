//! Evaluates the contrastive loss terms on a hand-sized problem.

use ndarray::{array, Array2};
use textssl::config::Level;
use textssl::losses::{info_nce, kl_symmetric, relational_loss, similarity_distribution, RelationalParams};
use textssl::queues::NegativeQueue;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> textssl::Result<()> {
    let mut queue = NegativeQueue::new(Level::Word, 4, 3)?;
    for v in [
        [1.0, 0.2, 0.0],
        [0.0, 1.0, 0.3],
        [0.3, 0.0, 1.0],
        [-1.0, 0.5, 0.5],
        [0.5, -1.0, 0.2],
    ] {
        let u: Vec<f32> = unit(&v).iter().map(|x| *x as f32).collect();
        queue.enqueue_batch(Level::Word, &u)?;
    }
    println!("queue holds {} of {} (oldest dropped)", queue.len(), queue.capacity());
    let negs: Array2<f64> = queue.snapshot()?;

    let q = ndarray::Array1::from(unit(&[0.9, 0.1, 0.2]));
    let p = ndarray::Array1::from(unit(&[1.0, 0.0, 0.1]));
    let params = RelationalParams {
        alpha: 0.3,
        tau_info: 0.07,
        tau_kl: 0.07,
    };
    println!(
        "info_nce      {:.6}",
        info_nce(q.view(), p.view(), negs.view(), params.tau_info)?
    );
    println!(
        "kl_symmetric  {:.6}",
        kl_symmetric(q.view(), p.view(), negs.view(), params.tau_kl)?
    );
    println!(
        "relational    {:.6}",
        relational_loss(q.view(), p.view(), negs.view(), &params)?
    );
    let dist = similarity_distribution(q.view(), negs.view(), params.tau_kl)?;
    println!("P(q)          {:.4?}", dist.probs);

    let far = array![-0.6, 0.8, 0.0];
    println!(
        "info_nce with a poor positive {:.6}",
        info_nce(q.view(), far.view(), negs.view(), params.tau_info)?
    );
    Ok(())
}
