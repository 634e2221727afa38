use imgalign::rng::Stream;
use imgalign::synthworld::{make_world, WorldConfig};
use nalgebra::DMatrix;

// Fit delta ~ [h, 1] by least squares on one sample, score on another.
#[test]
fn corruption_is_linearly_decodable_from_guidance() {
    let world = make_world(WorldConfig::default()).unwrap();
    let sample = |stream, n: usize| {
        let mut s = world.sampler(stream);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let t = s.next_triplet();
            let delta = t.losing.sub(&t.winning).unwrap();
            xs.push(t.guidance.as_slice().iter().copied().chain([1.0]).collect::<Vec<_>>());
            ys.push(delta.as_slice().to_vec());
        }
        let x = DMatrix::from_fn(n, xs[0].len(), |i, j| xs[i][j]);
        let y = DMatrix::from_fn(n, ys[0].len(), |i, j| ys[i][j]);
        (x, y)
    };
    let (x, y) = sample(Stream::Data, 2000);
    let (xt, yt) = sample(Stream::HeldOut, 1000);

    let coef = x.clone().svd(true, true).solve(&y, 1e-10).unwrap();
    let resid = &yt - &xt * coef;
    let mean = yt.row_mean();
    let total: f64 = yt.row_iter().map(|r| (r - &mean).norm_squared()).sum();
    let explained = 1.0 - resid.norm_squared() / total;
    assert!(explained >= 0.95, "explained variance {explained}");
}
