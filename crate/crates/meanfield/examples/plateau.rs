//! Scratch instrumentation: plateau level of consecutive flow distances.

use meanfield::dynamics::{AMatrix, DriftSpec, ModelParams, NoiseSpec};
use meanfield::field::{w1_mixture_grid_1d, MixtureField};
use meanfield::kernels::KernelSpec;
use meanfield::limit::{psi_step, LimitMethod};
use meanfield::transport::{w1_exact_1d, DiscreteMeasure};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn params_1d() -> ModelParams {
    ModelParams {
        dim: 1,
        a: AMatrix::scalar(0.3),
        delta: 0.05,
        alpha: 0.3,
        drift: DriftSpec::LinearMeanField {
            a1: 0.5,
            a2: 0.5,
            a3: 0.5,
        },
        noise: NoiseSpec {
            b: 0.15,
            c_scale: 0.2,
            l_scale: 1.0,
        },
        p: KernelSpec::gaussian(0.8, 1).unwrap(),
        pprime: KernelSpec::gaussian(0.5, 1).unwrap(),
    }
}

fn run(tag: &str, params: &ModelParams, mut mu: DiscreteMeasure, grid: usize, iters: usize) {
    let mut eta = MixtureField::single(KernelSpec::gaussian(1.0, 1).unwrap(), vec![0.0]).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let method = LimitMethod::QuantileGrid { grid };
    for it in 0..iters {
        let (mu2, eta2) = psi_step(&mu, &eta, params, method, &mut rng).unwrap();
        let dmu = w1_exact_1d(&mu, &mu2).unwrap();
        let deta = w1_mixture_grid_1d(&eta, &eta2, 2048).unwrap();
        println!(
            "{tag} it={it:3} dmu={dmu:10.3e} deta={deta:10.3e} total={:10.3e} ncomp={}",
            dmu + deta,
            eta2.len()
        );
        mu = mu2;
        eta = eta2;
    }
}

fn main() {
    let mut ar1 = params_1d();
    ar1.delta = 0.0;
    ar1.a = AMatrix::scalar(0.5);
    ar1.noise.b = 0.3;
    run(
        "ar1",
        &ar1,
        DiscreteMeasure::uniform(1, vec![0.0; 2048]).unwrap(),
        2048,
        60,
    );
    run(
        "uniq",
        &params_1d(),
        DiscreteMeasure::uniform(1, vec![0.0; 1024]).unwrap(),
        1024,
        60,
    );
}
