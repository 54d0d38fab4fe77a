// Debug: test the proof's key display I(W;M',D) >= (1/k)·Σ I(W;M_loo,D)
// on the violating toy, plus the D-sharing superadditivity step.
use replab_core::oracle::*;
use replab_core::rng::RngStream;

fn main() {
    let stream = RngStream::new(616);
    let i = 2u64;
    let mut toy = random_toy(&stream.child(i));
    toy.t_count = 4;
    toy.n = 3;
    toy.alphabet = 2;
    toy.task_dists = (0..4)
        .map(|t| {
            let p = 0.25 + 0.12 * t as f64 + 0.01 * i as f64;
            vec![p, 1.0 - p]
        })
        .collect();
    toy.loss_table = toy
        .loss_table
        .iter()
        .map(|row| row[..2.min(row.len())].to_vec())
        .collect();
    println!("toy: {toy:?}");
    // g = identity, so mean_g_mi * (kl+n) = E[I].
    for (k, l) in [(0usize, 0usize), (1, 1), (2, 2), (1, 2), (2, 1), (3, 3), (2, 3), (1, 3)] {
        if k > toy.t_count - 1 || l > toy.n { continue; }
        let v = mean_g_mi(&toy, k, l, GFn::Identity).unwrap();
        let cells = (k * l + toy.n) as f64;
        println!("E[I]({k},{l}) = {:.9}   E[I/(kl+n)] = {:.9}", v * cells, v);
    }
}
