//! Shared encoder with a global and a four-region local branch.
//!
//! ```text
//! x -> E -> e_G -> A_G ----------------------------> f_G -> C_G -> softmax -> P_G
//!             \-> split(tl|tr|bl|br) -> A_L[r] -> concat -> f_L -> C_L -> softmax -> P_L
//! ```
//!
//! Every perceptron applies `relu` after each of its two layers; classifiers
//! are a single affine map.
//!
//! # Checkpoint format
//!
//! Plain UTF-8 text. The first line is
//!
//! ```text
//! #lacmfer-ckpt-v1 input_dim=<d> embed_dim=<e> global_hidden=<g> local_hidden_per_region=<l> num_classes=<k>
//! ```
//!
//! followed by one line per parameter tensor, in the fixed order of
//! [`ModelParams::named_tensors`]:
//!
//! ```text
//! <name> <rows> <cols> <v_1> ... <v_rows*cols>
//! ```
//!
//! Values are row-major and written with shortest round-trip decimal
//! formatting, so a load after a save is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, max_value, Axis, Graph, NodeId, Tensor};

pub const REGIONS: [&str; 4] = ["tl", "tr", "bl", "br"];

const CHECKPOINT_MAGIC: &str = "#lacmfer-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub global_hidden: usize,
    pub local_hidden_per_region: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dim: 2,
            embed_dim: 32,
            global_hidden: 64,
            local_hidden_per_region: 16,
            num_classes: 5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arch.input_dim", self.input_dim),
            ("arch.embed_dim", self.embed_dim),
            ("arch.global_hidden", self.global_hidden),
            ("arch.local_hidden_per_region", self.local_hidden_per_region),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::config("arch.embed_dim", "must be divisible by 4"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("arch.num_classes", "must be at least 2"));
        }
        Ok(())
    }

    pub fn region_dim(&self) -> usize {
        self.embed_dim / 4
    }

    pub fn local_dim(&self) -> usize {
        4 * self.local_hidden_per_region
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(in x out)`
    pub weight: Tensor,
    /// `(1 x out)`
    pub bias: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("linear shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Two affine layers, each followed by `relu`; hidden width equals output width.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceptron {
    pub first: Linear,
    pub second: Linear,
}

impl Perceptron {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Perceptron {
            first: Linear::init(rng, input, output),
            second: Linear::init(rng, output, output),
        }
    }
}

/// All learnable parameters: encoder, global aligner, four region aligners
/// and the two classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub encoder: Perceptron,
    pub global_aligner: Perceptron,
    pub local_aligners: [Perceptron; 4],
    pub global_classifier: Linear,
    pub local_classifier: Linear,
}

/// Values of one forward pass.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub embedding: Tensor,
    pub global_features: Tensor,
    pub global_probs: Tensor,
    pub local_features: Tensor,
    pub local_probs: Tensor,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    pub embedding: NodeId,
    pub global_features: NodeId,
    pub global_probs: NodeId,
    pub local_features: NodeId,
    pub local_probs: NodeId,
}

impl BranchNodes {
    pub fn values(&self, g: &Graph) -> BranchOutputs {
        BranchOutputs {
            embedding: g.value(self.embedding).clone(),
            global_features: g.value(self.global_features).clone(),
            global_probs: g.value(self.global_probs).clone(),
            local_features: g.value(self.local_features).clone(),
            local_probs: g.value(self.local_probs).clone(),
        }
    }
}

impl ModelParams {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Perceptron::init(&mut rng, arch.input_dim, arch.embed_dim);
        let global_aligner = Perceptron::init(&mut rng, arch.embed_dim, arch.global_hidden);
        let local_aligners = std::array::from_fn(|_| {
            Perceptron::init(&mut rng, arch.region_dim(), arch.local_hidden_per_region)
        });
        let global_classifier = Linear::init(&mut rng, arch.global_hidden, arch.num_classes);
        let local_classifier = Linear::init(&mut rng, arch.local_dim(), arch.num_classes);
        Ok(ModelParams {
            arch: arch.clone(),
            encoder,
            global_aligner,
            local_aligners,
            global_classifier,
            local_classifier,
        })
    }

    /// Parameter tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(28);
        push_perceptron(&mut out, "encoder", &self.encoder);
        push_perceptron(&mut out, "global_aligner", &self.global_aligner);
        for (region, p) in REGIONS.iter().zip(&self.local_aligners) {
            push_perceptron(&mut out, &format!("local_aligner.{region}"), p);
        }
        out.push(("global_classifier.weight".into(), &self.global_classifier.weight));
        out.push(("global_classifier.bias".into(), &self.global_classifier.bias));
        out.push(("local_classifier.weight".into(), &self.local_classifier.weight));
        out.push(("local_classifier.bias".into(), &self.local_classifier.bias));
        out
    }

    /// Mutable views in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(28);
        for p in std::iter::once(&mut self.encoder)
            .chain(std::iter::once(&mut self.global_aligner))
            .chain(self.local_aligners.iter_mut())
        {
            out.push(&mut p.first.weight);
            out.push(&mut p.first.bias);
            out.push(&mut p.second.weight);
            out.push(&mut p.second.bias);
        }
        out.push(&mut self.global_classifier.weight);
        out.push(&mut self.global_classifier.bias);
        out.push(&mut self.local_classifier.weight);
        out.push(&mut self.local_classifier.bias);
        out
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Rebuilds parameters from tensors ordered as in [`Self::named_tensors`].
    pub fn from_tensors(arch: &ArchConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(arch, 0)?;
        let expected: Vec<Vec<usize>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Shape {
                op: "from_tensors",
                lhs: vec![expected.len()],
                rhs: vec![tensors.len()],
            });
        }
        for ((slot, t), shape) in params.tensors_mut().into_iter().zip(tensors).zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "from_tensors",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<BranchOutputs> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect();
        let xn = g.constant(x.clone());
        let nodes = forward_nodes(&mut g, &self.arch, &ids, xn)?;
        Ok(nodes.values(&g))
    }

    /// Per-sample label from whichever branch is more confident.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        Ok((0..x.rows())
            .map(|i| select_prediction(out.global_probs.row(i), out.local_probs.row(i)))
            .collect())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_text()).map_err(|e| Error::io(path, e))
    }

    pub fn checkpoint_text(&self) -> String {
        let a = &self.arch;
        let mut s = format!(
            "{CHECKPOINT_MAGIC} input_dim={} embed_dim={} global_hidden={} local_hidden_per_region={} num_classes={}\n",
            a.input_dim, a.embed_dim, a.global_hidden, a.local_hidden_per_region, a.num_classes
        );
        for (name, t) in self.named_tensors() {
            write!(s, "{name} {} {}", t.rows(), t.cols()).unwrap();
            for v in t.data() {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_checkpoint(&text, &path.display().to_string())
    }

    pub fn parse_checkpoint(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty checkpoint".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(1, format!("expected `{CHECKPOINT_MAGIC}` header")));
        }
        let mut arch = ArchConfig::default();
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| perr(1, format!("malformed header field `{kv}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| perr(1, format!("non-integer value in `{kv}`")))?;
            match k {
                "input_dim" => arch.input_dim = v,
                "embed_dim" => arch.embed_dim = v,
                "global_hidden" => arch.global_hidden = v,
                "local_hidden_per_region" => arch.local_hidden_per_region = v,
                "num_classes" => arch.num_classes = v,
                other => return Err(perr(1, format!("unknown header field `{other}`"))),
            }
        }
        arch.validate().map_err(|e| perr(1, e.to_string()))?;
        let template = ModelParams::init(&arch, 0)?;
        let mut tensors = Vec::new();
        for (name, expected) in template.named_tensors() {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| perr(0, format!("missing tensor `{name}`")))?;
            let lineno = idx + 1;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name.as_str()) {
                return Err(perr(lineno, format!("expected tensor `{name}`")));
            }
            let mut dim = || -> Result<usize> {
                parts
                    .next()
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| perr(lineno, "missing or invalid extent".into()))
            };
            let (r, c) = (dim()?, dim()?);
            if [r, c] != expected.shape() {
                return Err(perr(
                    lineno,
                    format!("`{name}` has shape {r}x{c}, expected {:?}", expected.shape()),
                ));
            }
            let data: Vec<f64> = parts
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(lineno, format!("bad value: {e}")))?;
            if data.len() != r * c {
                return Err(perr(
                    lineno,
                    format!("`{name}` has {} values, expected {}", data.len(), r * c),
                ));
            }
            tensors.push(Tensor::new(vec![r, c], data)?);
        }
        ModelParams::from_tensors(&arch, tensors)
    }
}

fn push_perceptron<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a Perceptron) {
    out.push((format!("{prefix}.0.weight"), &p.first.weight));
    out.push((format!("{prefix}.0.bias"), &p.first.bias));
    out.push((format!("{prefix}.1.weight"), &p.second.weight));
    out.push((format!("{prefix}.1.bias"), &p.second.bias));
}

fn perceptron_nodes(g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = g.affine(x, ids[0], ids[1])?;
    let h = g.relu(h);
    let o = g.affine(h, ids[2], ids[3])?;
    Ok(g.relu(o))
}

/// Records a forward pass; `ids` are the parameter leaves in checkpoint order.
pub fn forward_nodes(
    g: &mut Graph,
    arch: &ArchConfig,
    ids: &[NodeId],
    x: NodeId,
) -> Result<BranchNodes> {
    let xv = g.value(x);
    let (_, d) = xv.require_rank2("forward")?;
    if d != arch.input_dim {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![xv.rows(), arch.input_dim],
            rhs: xv.shape().to_vec(),
        });
    }
    let embedding = perceptron_nodes(g, &ids[0..4], x)?;
    let global_features = perceptron_nodes(g, &ids[4..8], embedding)?;
    let gl = g.affine(global_features, ids[24], ids[25])?;
    let global_probs = g.softmax(gl)?;

    let rd = arch.region_dim();
    let mut regions = Vec::with_capacity(4);
    for r in 0..4 {
        let chunk = g.slice(embedding, Axis::Cols, r * rd, rd)?;
        let base = 8 + 4 * r;
        regions.push(perceptron_nodes(g, &ids[base..base + 4], chunk)?);
    }
    let local_features = g.concat(&regions, Axis::Cols)?;
    let ll = g.affine(local_features, ids[26], ids[27])?;
    let local_probs = g.softmax(ll)?;

    Ok(BranchNodes {
        embedding,
        global_features,
        global_probs,
        local_features,
        local_probs,
    })
}

/// Picks the argmax of the more confident branch; ties go to the global branch.
pub fn select_prediction(global: &[f64], local: &[f64]) -> usize {
    if max_value(global) >= max_value(local) {
        argmax(global)
    } else {
        argmax(local)
    }
}
