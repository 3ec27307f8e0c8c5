//! The masked bound over all candidates equals the ordinary bound on the
//! subset the binary mask selects.
//!
//! cargo run --release --example masked_bound

use gpselect::adgrad::Mat;
use gpselect::estimators::{masked_bound, MaskVector};
use gpselect::gp::{collapsed_elbo, BoundMode, SubsetIndex, SvgpModel};
use gpselect::kernel::KernelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gpselect::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Mat::from_fn(15, 2, |_, _| rng.random_range(-2.0..2.0));
    let y = Mat::from_fn(15, 1, |i, _| x[(i, 0)].sin() * x[(i, 1)].cos());
    let z = Mat::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
    let mut model = SvgpModel::new(z, BoundMode::Collapsed)?;
    model.kernel = KernelParams::with_values(&[0.9, 1.4], 1.2);
    model.log_noise = (0.05f64).ln();

    for _ in 0..5 {
        let bits: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
        let subset = SubsetIndex::from_mask(&bits);
        let masked = masked_bound(&model, &MaskVector::from_subset(&subset, 8), &x, &y)?;
        let direct = collapsed_elbo(&model, &subset, &x, &y)?;
        let shown: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        println!("{shown}  masked {masked:12.6}  subset {direct:12.6}  diff {:.1e}", (masked - direct).abs());
    }
    Ok(())
}
