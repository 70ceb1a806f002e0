//! Finite-difference checks of every differentiable primitive and of the
//! full PEARL loss on a micro-model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Bound, Model, ModelConfig, PreparedExample, VlmContext};
use crate::objectives::DEFAULT_LAMBDA;
use crate::synthworld::{gen_example, Difficulty, Regime, Vocab};
use crate::tensor::{grad_check, Elementwise, GradCheckOptions, GradCheckReport, Graph, NodeId, Operand, Tensor};
use crate::trainer::pearl_batch_loss;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("valid shape")
}

/// Reduces `y` to a scalar through a fixed random weighting, so every output
/// element carries a distinct upstream gradient.
fn project(g: &mut Graph, y: NodeId, w: NodeId) -> Result<NodeId> {
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

type Check = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One check per differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut cases: Vec<(&'static str, Check, Vec<Tensor>)> = Vec::new();
    let r = &mut rng;

    cases.push((
        "matmul",
        Box::new(|g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y, x[2])
        }),
        vec![rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4, 5], 1.0), rand_tensor(r, &[3, 5], 1.0)],
    ));
    for (name, kind) in [("add", Elementwise::Add), ("sub", Elementwise::Sub), ("mul", Elementwise::Mul)] {
        cases.push((
            name,
            Box::new(move |g, x| {
                let y = g.elementwise(kind, x[0], Operand::Tensor(x[1]))?;
                project(g, y, x[2])
            }),
            vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)],
        ));
    }
    cases.push((
        "scale",
        Box::new(|g, x| {
            let y = g.scale(x[0], -1.3);
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)],
    ));
    cases.push((
        "add_scalar",
        Box::new(|g, x| {
            let y = g.add_scalar(x[0], 0.7);
            let y = g.mul(y, y)?;
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)],
    ));
    cases.push((
        "gelu",
        Box::new(|g, x| {
            let y = g.gelu(x[0]);
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[3, 4], 3.0), rand_tensor(r, &[3, 4], 1.0)],
    ));
    // inputs bounded away from the kink at 0
    let relu_in = Tensor::from_vec(vec![2, 3], vec![0.4, -0.3, 1.2, -1.5, 0.8, -0.05]).expect("shape");
    cases.push((
        "relu",
        Box::new(|g, x| {
            let y = g.relu(x[0]);
            project(g, y, x[1])
        }),
        vec![relu_in, rand_tensor(r, &[2, 3], 1.0)],
    ));
    cases.push((
        "softmax_rows",
        Box::new(|g, x| {
            let y = g.softmax_rows(x[0])?;
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[3, 5], 2.0), rand_tensor(r, &[3, 5], 1.0)],
    ));
    cases.push((
        "rmsnorm",
        Box::new(|g, x| {
            let y = g.rmsnorm(x[0], x[1])?;
            project(g, y, x[2])
        }),
        vec![rand_tensor(r, &[3, 6], 1.0), rand_tensor(r, &[6], 1.0), rand_tensor(r, &[3, 6], 1.0)],
    ));
    cases.push((
        "add_row_bias",
        Box::new(|g, x| {
            let y = g.add_row_bias(x[0], x[1])?;
            let y = g.mul(y, y)?;
            project(g, y, x[2])
        }),
        vec![rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[3, 4], 1.0)],
    ));
    cases.push((
        "embed_lookup",
        Box::new(|g, x| {
            let y = g.embed_lookup(x[0], &[2, 0, 2, 4])?;
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[5, 3], 1.0), rand_tensor(r, &[4, 3], 1.0)],
    ));
    cases.push((
        "gather_rows",
        Box::new(|g, x| {
            let y = g.gather_rows(x[0], &[Some(1), None, Some(1), Some(3)])?;
            let y = g.mul(y, y)?;
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[4, 3], 1.0), rand_tensor(r, &[4, 3], 1.0)],
    ));
    cases.push((
        "concat_slice_rows",
        Box::new(|g, x| {
            let c = g.concat_rows(&[x[0], x[1]])?;
            let s = g.slice_rows(c, 1, 3)?;
            let s = g.mul(s, s)?;
            project(g, s, x[2])
        }),
        vec![rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[3, 3], 1.0)],
    ));
    cases.push((
        "cross_entropy",
        Box::new(|g, x| g.cross_entropy(x[0], &[3, 0, 1, 4], &[1, 0, 1, 1])),
        vec![rand_tensor(r, &[4, 5], 2.0)],
    ));
    // residuals kept away from the |x| = 1 kink
    let pred = Tensor::from_vec(vec![2, 3], vec![0.3, -0.2, 2.5, -1.7, 0.05, 0.8]).expect("shape");
    let tgt = Tensor::from_vec(vec![2, 3], vec![0.1, 0.4, -0.3, 0.2, -0.6, 0.5]).expect("shape");
    cases.push(("smooth_l1", Box::new(|g, x| g.smooth_l1(x[0], x[1])), vec![pred.clone(), tgt.clone()]));
    cases.push(("smooth_l1_weighted", Box::new(|g, x| g.smooth_l1_weighted(x[0], x[1], &[0.3, 1.7])), vec![pred, tgt]));
    cases.push((
        "sum_mean",
        Box::new(|g, x| {
            let y = g.mul(x[0], x[0])?;
            let s = g.mean(y);
            let t = g.sum(x[0]);
            let u = g.mul(s, t)?;
            Ok(g.sum(u))
        }),
        vec![rand_tensor(r, &[2, 3], 1.0)],
    ));
    cases.push((
        "causal_attention",
        Box::new(|g, x| {
            let y = g.causal_attention(x[0], 2)?;
            project(g, y, x[1])
        }),
        vec![rand_tensor(r, &[5, 12], 1.0), rand_tensor(r, &[5, 4], 1.0)],
    ));

    cases.into_iter().map(|(name, f, inputs)| Ok(SuiteEntry { name, report: grad_check(f, &inputs, opts)? })).collect()
}

/// Micro-model used by the end-to-end check.
pub fn micro_config() -> ModelConfig {
    ModelConfig { d_model: 32, n_layers: 2, n_heads: 4, max_seq: 160, ..ModelConfig::default() }
}

/// Checks L_PEARL (three passes, alignment and next-latent terms) with
/// respect to every parameter tensor of a 2-layer, d=32 model on one
/// generated example, sampling `coords_per_tensor` coordinates per tensor.
pub fn end_to_end_pearl(seed: u64, coords_per_tensor: usize) -> Result<SuiteEntry> {
    let model = Model::new(micro_config(), seed)?;
    let ex = gen_example(seed, Regime::SingleMulti, Difficulty::EASY, 9, 0)?;
    let prepared = PreparedExample::new(&ex, &Vocab::standard())?;
    let inputs: Vec<Tensor> =
        model.params.iter().map(|p| Tensor::from_vec(p.shape.clone(), p.data.clone())).collect::<Result<_>>()?;
    let loss = |g: &mut Graph, x: &[NodeId]| -> Result<NodeId> {
        let b = Bound { ids: x.to_vec() };
        Ok(pearl_batch_loss(g, &model, &b, &[&prepared], VlmContext::Full, DEFAULT_LAMBDA, true)?.total)
    };
    // detached targets are held at their unperturbed values
    let mut base = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| base.insert(t)).collect();
    loss(&mut base, &ids)?;
    let targets = base.stop_gradient_values();
    let report = grad_check(
        |g, x| {
            g.pin_stop_gradients(targets.clone());
            loss(g, x)
        },
        &inputs,
        GradCheckOptions { max_coords: Some(coords_per_tensor), ..Default::default() },
    )?;
    Ok(SuiteEntry { name: "pearl_end_to_end", report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let suite = primitive_suite(1).unwrap();
        assert!(suite.len() >= 18);
        for e in &suite {
            assert!(e.passed(), "{}: {:?}", e.name, e.report);
        }
    }
}
