//! Finite-difference verification of every differentiable graph operation.
//!
//! Each op is checked on several random shapes against a central-difference
//! oracle that never touches the backward pass. All checks run at f64.

use wavegate::gradcheck::{assert_grads_close, FD_RTOL, FD_STEP};
use wavegate::model::{
    build_params, forward_loss, AttnKind, Bound, GateKind, ModelConfig,
};
use wavegate::attention::MqFeatureSpec;
use wavegate::pe::PeKind;
use wavegate::rng::SplitMix64;
use wavegate::tensor::{Graph, Tensor, Var};

fn randn(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Uniform in (lo, hi); for ops that need positive or bounded inputs.
fn rand_in(shape: &[usize], lo: f64, hi: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| lo + (hi - lo) * rng.next_f64())
}

/// Reduces an arbitrary output to a scalar that is sensitive to every
/// element: sum(out * c) for a fixed random constant c.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape.clone();
    let mut rng = SplitMix64::new(seed ^ 0x00c0_ffee);
    let c = g.constant(randn(&shape, 1.0, &mut rng));
    let prod = g.mul(out, c);
    g.sum_all(prod)
}

#[test]
fn elementwise_unary_ops() {
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 2]];
    for (si, shape) in shapes.iter().enumerate() {
        let mut rng = SplitMix64::new(100 + si as u64);
        let x = randn(shape, 0.8, &mut rng);
        let pos = rand_in(shape, 0.3, 2.0, &mut rng);
        for (name, needs_pos) in [
            ("gelu", false),
            ("sigmoid", false),
            ("exp", false),
            ("log", true),
            ("cos", false),
            ("sin", false),
            ("sqrt", true),
            ("scale", false),
            ("softmax", false),
            ("znorm", false),
            ("znorm-prefix", false),
        ] {
            let input = if needs_pos { pos.clone() } else { x.clone() };
            let build = move |g: &mut Graph<f64>, vs: &[Var]| {
                let y = match name {
                    "gelu" => g.gelu(vs[0]),
                    "sigmoid" => g.sigmoid(vs[0]),
                    "exp" => g.exp(vs[0]),
                    "log" => g.log(vs[0]),
                    "cos" => g.cos(vs[0]),
                    "sin" => g.sin(vs[0]),
                    "sqrt" => g.sqrt(vs[0]),
                    "scale" => g.scale(vs[0], -1.7),
                    "softmax" => {
                        let r = g.reshape(vs[0], vec![g.value(vs[0]).numel()]);
                        g.softmax(r)
                    }
                    "znorm" => g.znorm_last(vs[0]),
                    "znorm-prefix" => g.znorm_prefix(vs[0]),
                    _ => unreachable!(),
                };
                weighted_sum(g, y, si as u64)
            };
            assert_grads_close(&build, &[input], FD_STEP, FD_RTOL);
        }
    }
}

#[test]
fn add_mul_and_broadcast() {
    for (si, shape) in [[2usize, 5], [4, 3], [1, 6]].iter().enumerate() {
        let mut rng = SplitMix64::new(200 + si as u64);
        let a = randn(shape, 1.0, &mut rng);
        let b = randn(shape, 1.0, &mut rng);
        let row = randn(&[shape[1]], 1.0, &mut rng);
        let build_add = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.add(vs[0], vs[1]);
            weighted_sum(g, y, 0)
        };
        assert_grads_close(&build_add, &[a.clone(), b.clone()], FD_STEP, FD_RTOL);
        let build_mul = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.mul(vs[0], vs[1]);
            weighted_sum(g, y, 1)
        };
        assert_grads_close(&build_mul, &[a.clone(), b.clone()], FD_STEP, FD_RTOL);
        let build_bcast = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.add_broadcast(vs[0], vs[1]);
            weighted_sum(g, y, 2)
        };
        assert_grads_close(&build_bcast, &[a, row], FD_STEP, FD_RTOL);
    }
}

#[test]
fn matmul_variants_and_linear() {
    for (si, (m, k, n)) in [(3usize, 4usize, 2usize), (1, 5, 3), (4, 2, 4)]
        .into_iter()
        .enumerate()
    {
        let mut rng = SplitMix64::new(300 + si as u64);
        let a = randn(&[m, k], 0.7, &mut rng);
        let b = randn(&[k, n], 0.7, &mut rng);
        let bt = randn(&[n, k], 0.7, &mut rng);
        let bias = randn(&[n], 0.5, &mut rng);
        let build_mm = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.matmul(vs[0], vs[1]);
            weighted_sum(g, y, 0)
        };
        assert_grads_close(&build_mm, &[a.clone(), b.clone()], FD_STEP, FD_RTOL);
        let build_nt = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.matmul_nt(vs[0], vs[1]);
            weighted_sum(g, y, 1)
        };
        assert_grads_close(&build_nt, &[a.clone(), bt], FD_STEP, FD_RTOL);
        let build_lin = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.linear(vs[0], vs[1], vs[2]);
            weighted_sum(g, y, 2)
        };
        assert_grads_close(&build_lin, &[a, b, bias], FD_STEP, FD_RTOL);
    }
}

#[test]
fn shape_ops_reshape_take_rows_heads() {
    for (si, (b, h, t, dh)) in [(1usize, 2usize, 3usize, 4usize), (2, 1, 4, 2), (2, 3, 2, 2)]
        .into_iter()
        .enumerate()
    {
        let mut rng = SplitMix64::new(400 + si as u64);
        let d = h * dh;
        let x = randn(&[b * t, d], 0.9, &mut rng);
        let table = randn(&[t + 2, d], 0.9, &mut rng);
        let build_split_merge = move |g: &mut Graph<f64>, vs: &[Var]| {
            let x3 = g.reshape(vs[0], vec![b, t, d]);
            let heads = g.split_heads(x3, h);
            let back = g.merge_heads(heads);
            weighted_sum(g, back, 0)
        };
        assert_grads_close(&build_split_merge, &[x.clone()], FD_STEP, FD_RTOL);
        let build_take = move |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.take_rows(vs[0], t);
            weighted_sum(g, y, 1)
        };
        assert_grads_close(&build_take, &[table], FD_STEP, FD_RTOL);
    }
}

#[test]
fn causal_softmax_and_cross_entropy() {
    for (si, (b, t)) in [(1usize, 4usize), (2, 3), (1, 6)].into_iter().enumerate() {
        let mut rng = SplitMix64::new(500 + si as u64);
        let scores = randn(&[b, 2, t, t], 1.2, &mut rng);
        let build_cs = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.causal_softmax(vs[0]);
            weighted_sum(g, y, 0)
        };
        assert_grads_close(&build_cs, &[scores], FD_STEP, FD_RTOL);

        let v = 7;
        let logits = randn(&[b * t, v], 1.0, &mut rng);
        let targets: Vec<usize> = (0..b * t).map(|_| rng.next_below(v)).collect();
        let build_ce = move |g: &mut Graph<f64>, vs: &[Var]| g.cross_entropy(vs[0], &targets);
        assert_grads_close(&build_ce, &[logits], FD_STEP, FD_RTOL);
    }
}

#[test]
fn layer_norm_and_embedding() {
    for (si, (rows, d)) in [(4usize, 6usize), (2, 3), (5, 2)].into_iter().enumerate() {
        let mut rng = SplitMix64::new(600 + si as u64);
        let x = randn(&[rows, d], 1.0, &mut rng);
        let gamma = rand_in(&[d], 0.5, 1.5, &mut rng);
        let beta = randn(&[d], 0.3, &mut rng);
        let build_ln = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.layer_norm(vs[0], vs[1], vs[2]);
            weighted_sum(g, y, 0)
        };
        assert_grads_close(&build_ln, &[x, gamma, beta], FD_STEP, FD_RTOL);

        let vocab = rows + 3;
        let table = randn(&[vocab, d], 0.8, &mut rng);
        let ids: Vec<usize> = (0..rows).map(|_| rng.next_below(vocab)).collect();
        let build_emb = move |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.embedding(vs[0], &ids, vec![ids.len()]);
            weighted_sum(g, y, 1)
        };
        assert_grads_close(&build_emb, &[table], FD_STEP, FD_RTOL);
    }
}

#[test]
fn gate_pipeline_ops() {
    for (si, (b, h, t, dh)) in [(1usize, 2usize, 4usize, 3usize), (2, 1, 3, 2), (1, 3, 5, 2)]
        .into_iter()
        .enumerate()
    {
        let mut rng = SplitMix64::new(700 + si as u64);
        let x = randn(&[b, h, t, dh], 0.9, &mut rng);
        let w = randn(&[h, dh], 0.9, &mut rng);
        let alpha = rand_in(&[h], 0.5, 2.0, &mut rng);
        let tau = randn(&[h], 0.4, &mut rng);
        let build_hd = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.head_dot(vs[0], vs[1]);
            weighted_sum(g, y, 0)
        };
        assert_grads_close(&build_hd, &[x.clone(), w.clone()], FD_STEP, FD_RTOL);

        let build_gs = |g: &mut Graph<f64>, vs: &[Var]| {
            let z = g.head_dot(vs[0], vs[1]);
            let zn = g.znorm_last(z);
            let gate = g.gate_sigmoid(zn, vs[2], vs[3]);
            weighted_sum(g, gate, 1)
        };
        assert_grads_close(&build_gs, &[x.clone(), w, alpha, tau], FD_STEP, FD_RTOL);

        // attention rows renormalized by a gate; both inputs get gradients
        let scores = randn(&[b, h, t, t], 1.0, &mut rng);
        let gate_logits = randn(&[b, h, t], 0.8, &mut rng);
        let build_gr = |g: &mut Graph<f64>, vs: &[Var]| {
            let a = g.causal_softmax(vs[0]);
            let gate = g.sigmoid(vs[1]);
            let y = g.gate_renorm(a, gate);
            weighted_sum(g, y, 2)
        };
        assert_grads_close(&build_gr, &[scores.clone(), gate_logits], FD_STEP, FD_RTOL);

        // shared gate broadcast over heads
        let shared = randn(&[b, 1, t], 0.8, &mut rng);
        let build_shared = |g: &mut Graph<f64>, vs: &[Var]| {
            let a = g.causal_softmax(vs[0]);
            let gate = g.sigmoid(vs[1]);
            let y = g.gate_renorm(a, gate);
            weighted_sum(g, y, 3)
        };
        assert_grads_close(&build_shared, &[scores, shared], FD_STEP, FD_RTOL);
    }
}

#[test]
fn positional_encoding_ops() {
    for (si, (t, half)) in [(6usize, 3usize), (4, 2), (8, 4)].into_iter().enumerate() {
        let mut rng = SplitMix64::new(800 + si as u64);
        // log-frequencies and log-bandwidths in a realistic range
        let log_omega = rand_in(&[half], -2.0, 0.5, &mut rng);
        let log_sigma = rand_in(&[half], 0.3, 1.8, &mut rng);
        let build_mope = move |g: &mut Graph<f64>, vs: &[Var]| {
            let pe = g.mope_encode(vs[0], vs[1], t);
            weighted_sum(g, pe, 0)
        };
        assert_grads_close(&build_mope, &[log_omega, log_sigma], FD_STEP, FD_RTOL);

        let dh = 2 * half.max(1);
        let x = randn(&[1, 2, t, dh], 0.9, &mut rng);
        let build_rope = |g: &mut Graph<f64>, vs: &[Var]| {
            let y = g.rope_apply(vs[0], 10_000.0);
            weighted_sum(g, y, 1)
        };
        assert_grads_close(&build_rope, &[x], FD_STEP, FD_RTOL);
    }
}

#[test]
fn conv_scores_grads() {
    for (si, (b, h, t, dh, l_max)) in
        [(1usize, 1usize, 5usize, 3usize, 2usize), (1, 2, 4, 2, 1), (2, 1, 6, 2, 3)]
            .into_iter()
            .enumerate()
    {
        let mut rng = SplitMix64::new(900 + si as u64);
        let q = randn(&[b, h, t, dh], 0.8, &mut rng);
        let k = randn(&[b, h, t, dh], 0.8, &mut rng);
        let lambda = randn(&[2 * l_max + 1], 0.6, &mut rng);
        let build = move |g: &mut Graph<f64>, vs: &[Var]| {
            let w = g.softmax(vs[2]);
            let s = g.conv_scores(vs[0], vs[1], w, l_max);
            let a = g.causal_softmax(s);
            weighted_sum(g, a, 0)
        };
        assert_grads_close(&build, &[q, k, lambda], FD_STEP, FD_RTOL);
    }
}

#[test]
fn reductions() {
    for (si, shape) in [[3usize, 4], [2, 2], [1, 7]].iter().enumerate() {
        let mut rng = SplitMix64::new(1000 + si as u64);
        let x = randn(shape, 1.1, &mut rng);
        let build_sum = |g: &mut Graph<f64>, vs: &[Var]| g.sum_all(vs[0]);
        assert_grads_close(&build_sum, &[x.clone()], FD_STEP, FD_RTOL);
        let build_mean = |g: &mut Graph<f64>, vs: &[Var]| g.mean_all(vs[0]);
        assert_grads_close(&build_mean, &[x], FD_STEP, FD_RTOL);
    }
}

/// End-to-end gradients of a tiny model, every architectural feature on.
/// Looser tolerance than per-op checks: depth compounds rounding.
#[test]
fn tiny_model_end_to_end_gradcheck() {
    let configs = [
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            seq_len: 6,
            vocab_size: 9,
            pe: PeKind::Mope,
            attn: AttnKind::Conv { l_max: 2 },
            gate: GateKind::Ega,
            scale_init: true,
        },
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            seq_len: 6,
            vocab_size: 9,
            pe: PeKind::Learned,
            attn: AttnKind::Dot,
            gate: GateKind::Mq(MqFeatureSpec::energy_flux()),
            scale_init: false,
        },
    ];
    for (ci, cfg) in configs.iter().enumerate() {
        let mut ps = build_params::<f64>(cfg, 11 + ci as u64);
        let mut rng = SplitMix64::new(21 + ci as u64);
        let (b, t) = (1usize, cfg.seq_len);
        let ids: Vec<usize> = (0..b * t).map(|_| rng.next_below(cfg.vocab_size)).collect();
        let targets: Vec<usize> =
            (0..b * t).map(|_| rng.next_below(cfg.vocab_size)).collect();

        let loss_of = |ps: &wavegate::optim::ParamSet<f64>| -> f64 {
            let mut g = Graph::new();
            let bound = Bound::bind(&mut g, ps);
            let (loss, _) = forward_loss(&mut g, cfg, &bound, &ids, &targets, b, t);
            g.value(loss).item()
        };

        // analytic gradients from one backward pass
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &ps);
        let (loss, _) = forward_loss(&mut g, cfg, &bound, &ids, &targets, b, t);
        g.backward(loss).unwrap();
        let analytic = bound.grads(&g);
        drop(g);

        // spot-check a deterministic sample of elements per parameter;
        // smaller step than the op-level checks because the causal gate
        // normalization has high curvature at tiny prefix variances
        let h = 1e-6;
        let names: Vec<String> = ps.names().to_vec();
        for (pi, name) in names.iter().enumerate() {
            // spectral gate features are detached measurements of the
            // embedded sequence, so the embedding grad intentionally omits
            // that path; finite differences would see it
            if matches!(cfg.gate, GateKind::Mq(_))
                && (name == "tok_emb" || name == "pos_emb")
            {
                continue;
            }
            let n = ps.get(name).numel();
            let stride = (n / 6).max(1);
            for e in (0..n).step_by(stride) {
                let orig = ps.get(name).data[e];
                ps.get_mut(name).data[e] = orig + h;
                let lp = loss_of(&ps);
                ps.get_mut(name).data[e] = orig - h;
                let lm = loss_of(&ps);
                ps.get_mut(name).data[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let ana = analytic[pi]
                    .as_ref()
                    .map(|t| t.data[e])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(ana.abs()).max(1e-3);
                assert!(
                    (fd - ana).abs() / denom < 1e-3,
                    "config {ci} param {name}[{e}]: fd {fd:.6e} vs analytic {ana:.6e}"
                );
            }
        }
    }
}
