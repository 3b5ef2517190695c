//! Finite-difference checks of every differentiable operation, each on
//! three random small shapes in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tdet_core::autograd::{Tape, Var};
use tdet_core::cells::{ConvGruWeights, DenseGru, DenseLstm, GruWeights, RecurrentCell, SqueezeFactorization};
use tdet_core::conv::{ConvGeometry, ConvMode, Padding};
use tdet_core::entropy::{attention_gate, EntropyMap};
use tdet_core::gradcheck::{grad_check, GradCheckConfig};
use tdet_core::{Result, Shape, Tensor};

use crate::loss::{ssd_loss, AnchorTargets};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub shapes: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Suite {
    rng: ChaCha8Rng,
    cfg: GradCheckConfig,
    out: Vec<OpCheck>,
}

impl Suite {
    fn run<F>(&mut self, op: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = grad_check(op, inputs, &self.cfg, f)?;
        match self.out.iter_mut().find(|c| c.op == op) {
            Some(c) => {
                c.shapes += 1;
                c.max_rel_error = c.max_rel_error.max(report.max_rel_error);
            }
            None => self.out.push(OpCheck {
                op: op.to_string(),
                shapes: 1,
                max_rel_error: report.max_rel_error,
            }),
        }
        Ok(())
    }

    fn uniform(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut self.rng)
    }

    /// Magnitudes in `[0.1, 1)` with random sign, away from the ReLU kink.
    fn away_from_zero(&mut self, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = self.rng.gen_range(0.1..1.0);
                if self.rng.gen() {
                    3.0 * v
                } else {
                    -3.0 * v
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("sized")
    }

    fn cell<C: RecurrentCell<f64>>(&mut self, op: &str, cell: &C, x: Tensor<f64>, state: Tensor<f64>) -> Result<()> {
        let mut inputs = vec![x, state];
        inputs.extend(cell.params().into_iter().map(|(_, t)| t.clone()));
        self.run(op, &inputs, |t, v| cell.step_on(t, &v[2..], v[0], v[1]))
    }
}

/// Runs every check; the result lists one entry per operation with the
/// worst relative error over its shapes.
pub fn gradient_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg: GradCheckConfig {
            tolerance: TOLERANCE,
            seed,
            ..GradCheckConfig::default()
        },
        out: Vec::new(),
    };

    let convs: [(&str, [usize; 4], [usize; 4], ConvGeometry); 9] = [
        ("conv2d", [1, 2, 4, 4], [3, 2, 3, 3], ConvGeometry::same(3, ConvMode::Standard)),
        ("conv2d", [2, 3, 5, 4], [2, 3, 3, 3], ConvGeometry::new(2, Padding::zero(1), ConvMode::Standard)),
        ("conv2d", [1, 1, 6, 6], [2, 1, 5, 5], ConvGeometry::new(1, Padding::replicate(2), ConvMode::Standard)),
        ("depthwise_conv", [1, 3, 5, 5], [3, 1, 3, 3], ConvGeometry::same(3, ConvMode::Depthwise)),
        ("depthwise_conv", [2, 2, 4, 3], [2, 1, 3, 3], ConvGeometry::new(2, Padding::replicate(1), ConvMode::Depthwise)),
        ("depthwise_conv", [1, 4, 3, 3], [4, 1, 1, 1], ConvGeometry::new(1, Padding::NONE, ConvMode::Depthwise)),
        ("pointwise_conv", [1, 2, 3, 3], [3, 2, 1, 1], ConvGeometry::pointwise()),
        ("pointwise_conv", [2, 4, 2, 2], [1, 4, 1, 1], ConvGeometry::pointwise()),
        ("pointwise_conv", [1, 1, 4, 1], [2, 1, 1, 1], ConvGeometry::pointwise()),
    ];
    for (op, xs, ks, geom) in convs {
        let inputs = [s.uniform(xs), s.uniform(ks), s.uniform([1, ks[0], 1, 1])];
        s.run(op, &inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom))?;
    }
    for (c, side, out) in [(2, 4, 3), (3, 5, 2), (1, 3, 1)] {
        let inputs = [s.uniform([1, c, side, side]), s.uniform([c, 1, 3, 3]), s.uniform([out, c, 1, 1])];
        s.run("depthwise_separable", &inputs, |t, v| {
            let d = t.conv2d(v[0], v[1], None, ConvGeometry::same(3, ConvMode::Depthwise))?;
            t.conv2d(d, v[2], None, ConvGeometry::pointwise())
        })?;
    }

    for shape in [[1, 1, 2, 2], [2, 3, 2, 1], [1, 4, 3, 3]] {
        let x = s.away_from_zero(shape);
        let one = std::slice::from_ref(&x);
        s.run("sigmoid", one, |t, v| Ok(t.sigmoid(v[0])))?;
        s.run("tanh", one, |t, v| Ok(t.tanh(v[0])))?;
        s.run("relu", one, |t, v| Ok(t.relu(v[0])))?;
    }

    for (shape, side) in [([1, 4, 4, 4], 8), ([2, 2, 3, 3], 9), ([1, 1, 5, 5], 5)] {
        let values = (0..side * side).map(|_| s.rng.gen_range(0.0..3.0)).collect();
        let m = EntropyMap::new(side, side, values)?;
        let gate = attention_gate::<f64>(&m, shape[2], shape[3], shape[0])?;
        let f = s.uniform(shape);
        s.run("feature_enhance", &[f], |t, v| t.scale_channels(v[0], gate.clone()))?;
    }

    for f in [SqueezeFactorization::PerGate, SqueezeFactorization::SharedInput] {
        for (inp, hid, side) in [(8, 4, 4), (3, 2, 5), (2, 3, 3)] {
            let w = GruWeights::<f64>::random(inp, hid, 3, f, &mut s.rng)?;
            let (x, h) = (s.uniform([1, inp, side, side]), s.uniform([1, hid, side, side]));
            s.cell("squeezed_gru_step", &w, x, h)?;
        }
    }
    for (inp, hid, k, side) in [(2, 2, 3, 4), (3, 1, 1, 3), (1, 3, 3, 5)] {
        let w = ConvGruWeights::<f64>::random(inp, hid, k, &mut s.rng)?;
        let (x, h) = (s.uniform([1, inp, side, side]), s.uniform([1, hid, side, side]));
        s.cell("conv_gru_step", &w, x, h)?;
    }
    for (batch, inp, hid) in [(1, 3, 2), (2, 5, 4), (1, 1, 6)] {
        let gru = DenseGru::<f64>::random(inp, hid, &mut s.rng)?;
        let x = s.uniform(Shape::vector(batch, inp));
        let h = s.uniform(Shape::vector(batch, hid));
        s.cell("dense_gru_step", &gru, x.clone(), h)?;
        let lstm = DenseLstm::<f64>::random(inp, hid, &mut s.rng)?;
        let hc = s.uniform(Shape::vector(batch, 2 * hid));
        s.cell("dense_lstm_step", &lstm, x, hc)?;
    }

    for (batch, anchors, classes) in [(1, 8, 2), (2, 12, 3), (2, 20, 4)] {
        let targets: Vec<AnchorTargets> = (0..batch)
            .map(|_| {
                let labels = (0..anchors)
                    .map(|_| if s.rng.gen_bool(0.25) { s.rng.gen_range(1..=classes) } else { 0 })
                    .collect();
                let offsets = (0..anchors).map(|_| [0; 4].map(|_: u8| s.rng.gen_range(-2.0f32..2.0))).collect();
                AnchorTargets { labels, offsets }
            })
            .collect();
        let mut pred = Tensor::<f64>::uniform([batch, 1, anchors, 5 + classes], 2.0, &mut s.rng);
        // Keep box offsets clear of the L1 kink.
        for (n, t) in targets.iter().enumerate() {
            for a in 0..anchors {
                for k in 0..4 {
                    let delta: f64 = s.rng.gen_range(0.05..1.0) * if s.rng.gen() { 1.0 } else { -1.0 };
                    pred.set(n, 0, a, k, t.offsets[a][k] as f64 + delta);
                }
            }
        }
        s.run("ssd_loss", &[pred], |t, v| Ok(ssd_loss(t, v[0], &targets)?.0))?;
    }
    Ok(s.out)
}
