//! Fixtures shared by the benchmarks.

use jbsde_core::coefficients::{Diffusion, Drift, Driver, JumpCoefficient, ModelCoefficients, Terminal};
use jbsde_core::sde::{InitialState, TimeGrid};
use jbsde_core::{LevyMeasure, TruncationIndex};

/// Constant drift 0.1 and diffusion 0.2, jumps `β = e` on the reference
/// measure, `g(x) = x` and driver `h = c y`.
pub struct Fixture {
    pub model: ModelCoefficients,
    pub measure: LevyMeasure,
    pub k: TruncationIndex,
    pub grid: TimeGrid,
    pub init: InitialState,
}

impl Fixture {
    pub fn linear(driver: f64, k: u32, steps: usize) -> Self {
        let h = if driver == 0.0 { Driver::Zero } else { Driver::Own { y: driver, q: 0.0 } };
        Self {
            model: ModelCoefficients::scalar(
                Drift::Constant(0.1),
                Diffusion::Constant(0.2),
                JumpCoefficient::Linear { scale: 1.0 },
                Terminal::Linear { slope: 1.0, offset: 0.0 },
                h,
            ),
            measure: LevyMeasure::reference(0.5).expect("reference measure"),
            k: TruncationIndex::new(k).expect("k >= 1"),
            grid: TimeGrid::new(0.0, 1.0, steps).expect("grid"),
            init: InitialState::Dispersed { lo: vec![1.0], hi: vec![3.0] },
        }
    }

    /// Same dynamics with a driver reading the nonlocal term, which forces
    /// the quadrature path of the solver.
    pub fn nonlocal(k: u32, steps: usize) -> Self {
        let mut f = Self::linear(0.0, k, steps);
        f.model.drivers = vec![Driver::SineY { amplitude: 0.5, q: 0.2 }];
        f
    }
}
