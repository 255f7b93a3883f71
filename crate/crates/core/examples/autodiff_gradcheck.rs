//! Build a small network on the tape and compare its reverse-mode
//! gradient with central differences.
//!
//!     cargo run --example autodiff_gradcheck

use vaem::autodiff::{gradient_check, Activation, Init, Mlp, ParamSet, Tensor};
use vaem::{gaussian, rng};

fn main() -> vaem::Result<()> {
    let mut r = rng::seeded(0);
    let mut params = ParamSet::new();
    let x = params.add("x", Tensor::matrix(8, 4, gaussian::std_normals(&mut r, 32))?);
    let net = Mlp::new(&mut params, "net", &[4, 16, 3], Activation::Identity, Init::Glorot, &mut r);
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let out = net.forward(tape, bound, bound.get(x))?;
            let logp = tape.log_softmax_rows(out)?;
            tape.mean(logp)
        },
        1e-6,
    )?;
    println!("{} parameter tensors, worst relative gradient error {worst:.2e}", params.len());
    Ok(())
}
