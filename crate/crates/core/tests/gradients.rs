use vaem::autodiff::{gradient_check, Activation, Init, Mlp, ParamSet, SetBatch, Tensor};
use vaem::dependency::{DependencyConfig, DependencyVae};
use vaem::gaussian;
use vaem::likelihood::LikelihoodHead;
use vaem::rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut vaem::rng::Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, gaussian::std_normals(rng, r * c)).unwrap()
}

#[test]
fn elementwise_ops_match_central_differences() {
    let mut rng = rng::seeded(3);
    let mut params = ParamSet::new();
    let a = params.add("a", random(&mut rng, 3, 4));
    let b = params.add("b", random(&mut rng, 1, 4));
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let x = tape.add(bound.get(a), bound.get(b))?;
            let s = tape.sigmoid(x)?;
            let sp = tape.softplus(x)?;
            let e = tape.exp(s)?;
            let m = tape.mul(e, sp)?;
            let sq = tape.square(m)?;
            let l = tape.log(sq)?;
            let r = tape.relu(x)?;
            let t = tape.add(l, r)?;
            let c = tape.sum_cols(t)?;
            tape.mean(c)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn matmul_transpose_and_slices() {
    let mut rng = rng::seeded(4);
    let mut params = ParamSet::new();
    let a = params.add("a", random(&mut rng, 3, 5));
    let b = params.add("b", random(&mut rng, 5, 2));
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let p = tape.matmul(bound.get(a), bound.get(b))?;
            let t = tape.transpose(p)?;
            let top = tape.slice_rows(t, 0, 1)?;
            let left = tape.slice_cols(p, 1, 2)?;
            let lt = tape.transpose(left)?;
            let both = tape.concat_rows(&[top, lt])?;
            let wide = tape.concat_cols(&[both, both])?;
            let sm = tape.log_softmax_rows(wide)?;
            let lse = tape.log_sum_exp_cols(wide)?;
            let s1 = tape.sum(sm)?;
            let s2 = tape.sum(lse)?;
            let tot = tape.add(s1, s2)?;
            let sm2 = tape.softmax_rows(p)?;
            let s3 = tape.sum(sm2)?;
            let sc = tape.scale(s3, 0.3)?;
            let o = tape.offset(sc, 1.0)?;
            tape.add(tot, o)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn mlp_with_all_activations() {
    let mut rng = rng::seeded(5);
    let mut params = ParamSet::new();
    let net = Mlp::new(&mut params, "n", &[3, 6, 4, 2], Activation::Sigmoid, Init::Glorot, &mut rng);
    let input = random(&mut rng, 5, 3);
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let x = tape.constant(input.clone());
            let y = net.forward(tape, bound, x)?;
            let l = tape.log(y)?;
            tape.sum(l)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn set_feature_map_gradients() {
    let mut rng = rng::seeded(6);
    let mut params = ParamSet::new();
    let table = params.add("t", random(&mut rng, 5, 3));
    let w = params.add("w", random(&mut rng, 3, 4));
    let bias = params.add("b", random(&mut rng, 1, 4));
    let mut set = SetBatch::new(2, 3);
    set.set(0, 0, 1, 0.7);
    set.set(0, 2, 4, -1.3);
    set.set(1, 1, 0, 2.0);
    set.set(1, 2, 1, 0.4);
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let p = tape.matmul(bound.get(table), bound.get(w))?;
            let agg = tape.set_feature_map(p, bound.get(bias), set.clone())?;
            let sq = tape.square(agg)?;
            tape.sum(sq)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn likelihood_heads_on_tape() {
    let mut rng = rng::seeded(7);
    for (head, x) in [
        (LikelihoodHead::Gaussian { variance: 0.1 }, vec![0.2, 0.9, 0.5]),
        (LikelihoodHead::Categorical { classes: 3 }, vec![0.0, 2.0, 1.0]),
        (LikelihoodHead::Ordinal { levels: 4 }, vec![0.0, 3.0, 1.0]),
    ] {
        let mut params = ParamSet::new();
        let out = params.add("o", random(&mut rng, 3, head.output_dim()));
        let worst = gradient_check(
            &mut params,
            |tape, bound| {
                let lp = head.log_prob_rows(tape, bound.get(out), &x)?;
                tape.sum(lp)
            },
            1e-6,
        )
        .unwrap();
        assert!(worst < TOL, "{head:?}: worst relative error {worst}");
    }
}

#[test]
fn reparameterized_gaussian_terms() {
    let mut rng = rng::seeded(8);
    let mut params = ParamSet::new();
    let mean = params.add("m", random(&mut rng, 4, 3));
    let lv = params.add("lv", random(&mut rng, 4, 3));
    let eps = gaussian::std_normals(&mut rng, 12);
    let worst = gradient_check(
        &mut params,
        |tape, bound| {
            let e = tape.constant(Tensor::matrix(4, 3, eps.clone())?);
            let h = gaussian::reparam(tape, bound.get(mean), bound.get(lv), e)?;
            let zero = tape.constant(Tensor::zeros(1, 3));
            let lp = gaussian::log_normal_rows(tape, h, bound.get(mean), zero)?;
            let kl = gaussian::kl_std_normal_rows(tape, bound.get(mean), bound.get(lv))?;
            let lq = gaussian::log_q_reparam_rows(tape, bound.get(lv), &eps, 4)?;
            let a = tape.sub(lp, kl)?;
            let b = tape.add(a, lq)?;
            tape.sum(b)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn partial_elbo_of_small_dependency_vae() {
    let mut rng = rng::seeded(9);
    let config = DependencyConfig {
        latent: 2,
        embed: 2,
        features: 3,
        head_hidden: vec![4],
        decoder_hidden: vec![3],
        k_prior: 2,
        ..DependencyConfig::default()
    };
    let mut vae = DependencyVae::new(&[1, 3, 1], config, Init::Glorot, &mut rng);
    let x = vec![0.3, 2.0, 0.8, 0.6, 0.0, 0.1, 0.5, 1.0, 0.9];
    let z = gaussian::std_normals(&mut rng, 9);
    let mask = vec![true, true, false, true, true, true, false, true, true];
    let zm = z.clone();
    vae.choose_pseudo_inputs(&x, &zm, &mask, &mut rng).unwrap();
    let eps = gaussian::std_normals(&mut rng, 6);
    let worst = gradient_check(
        vae.clone().params_mut(),
        |tape, bound| {
            let (elbo, _) = vae.partial_elbo_tape(tape, bound, &x, &z, &mask, &eps, None)?;
            tape.sum(elbo)
        },
        1e-6,
    )
    .unwrap();
    assert!(worst < TOL, "worst relative error {worst}");
}
