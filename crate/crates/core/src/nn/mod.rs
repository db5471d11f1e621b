//! Minimal neural-network toolkit: autodiff tape, parameters, optimizer,
//! recurrent cell and gradient checking.

pub mod gradcheck;
pub mod lstm;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use lstm::Lstm;
pub use params::{Adam, Bound, ParamId, ParamStore};
pub use tape::{Grads, Tape, Tensor, Var};

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))` summed over all
/// entries: `0.5 * Σ(mu² + σ² - 1 - log σ²)`.
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, logvar);
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5)
}

/// Fully connected layer on a `[batch, in]` matrix.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            params::init_normal(rng, &[input, output], input, 1.0),
        );
        let b = store.add(format!("{name}.bias"), params::zeros(&[output]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p[self.w]);
        tape.add_row(y, p[self.b])
    }
}
