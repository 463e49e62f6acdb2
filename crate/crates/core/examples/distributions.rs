//! Distributions: sampling, densities, and score gradients in unconstrained
//! coordinates, checked against a central difference.

use pcomb::dist::DistDescriptor;
use pcomb::rng::RngStream;

fn main() -> pcomb::Result<()> {
    let mut rng = RngStream::new(7);
    let dists = [
        DistDescriptor::normal_diag(vec![0.5, -1.0], vec![1.0, 0.3])?,
        DistDescriptor::categorical(vec![0.2, 0.5, 0.3])?,
        DistDescriptor::dirichlet(vec![2.0, 1.0, 0.5])?,
    ];
    for d in &dists {
        let x = d.sample(&mut rng)?;
        let u = d.unconstrained();
        let grad = d.score_grad(&x)?;
        let h = 1e-5;
        let fd: Vec<f64> = (0..u.len())
            .map(|i| {
                let mut hi = u.clone();
                let mut lo = u.clone();
                hi[i] += h;
                lo[i] -= h;
                let f = |v: &[f64]| DistDescriptor::from_unconstrained(d.family(), v).unwrap().log_prob(&x).unwrap();
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect();
        println!("{:?}", d.family());
        println!("  x = {x:?}, log p = {:.4}", d.log_prob(&x)?);
        println!("  score    {grad:.6?}");
        println!("  central  {fd:.6?}");
    }
    Ok(())
}
