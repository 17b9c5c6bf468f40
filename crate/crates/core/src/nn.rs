//! Building blocks shared by both passes: a gated recurrent cell, additive
//! attention and the output projection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Binder, Graph, ParamStore, Tensor, Var};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn weight(name: String, shape: &[usize]) -> Self {
        ParamSpec { name, shape: shape.to_vec(), init: Init::Uniform }
    }

    fn bias(name: String, width: usize) -> Self {
        ParamSpec { name, shape: vec![width], init: Init::Zeros }
    }
}

/// Fills `store` following `specs` in order: weights uniform in
/// `(-INIT_RANGE, INIT_RANGE)`, biases zero.
pub fn init_params(specs: &[ParamSpec], rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform => (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect(),
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data).expect("spec shape matches data"));
    }
}

pub fn embedding_specs(prefix: &str, rows: usize, width: usize) -> Vec<ParamSpec> {
    vec![ParamSpec::weight(format!("{prefix}.emb"), &[rows, width])]
}

const GRU_GATES: [&str; 3] = ["z", "r", "n"];

pub fn gru_specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for gate in GRU_GATES {
        specs.push(ParamSpec::weight(format!("{prefix}.w{gate}"), &[hidden, input]));
        specs.push(ParamSpec::weight(format!("{prefix}.u{gate}"), &[hidden, hidden]));
        specs.push(ParamSpec::bias(format!("{prefix}.b{gate}"), hidden));
    }
    specs
}

pub fn attention_specs(prefix: &str, query: usize, memory: usize, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.wq"), &[width, query]),
        ParamSpec::weight(format!("{prefix}.wm"), &[memory, width]),
        ParamSpec::weight(format!("{prefix}.v"), &[width]),
    ]
}

pub fn output_specs(prefix: &str, input: usize, emit: usize) -> Vec<ParamSpec> {
    vec![ParamSpec::weight(format!("{prefix}.w"), &[emit, input]), ParamSpec::bias(format!("{prefix}.b"), emit)]
}

/// Gated recurrent cell:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `n = tanh(Wn x + bn + r ⊙ Un h)`, `h' = n + z ⊙ (h - n)`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    wz: Var,
    uz: Var,
    bz: Var,
    wr: Var,
    ur: Var,
    br: Var,
    wn: Var,
    un: Var,
    bn: Var,
    hidden: usize,
}

impl GruVars {
    pub fn bind(g: &mut Graph, b: &mut Binder, prefix: &str) -> Result<Self> {
        let mut get = |suffix: &str| b.bind(g, &format!("{prefix}.{suffix}"));
        let wz = get("wz")?;
        let uz = get("uz")?;
        let bz = get("bz")?;
        let wr = get("wr")?;
        let ur = get("ur")?;
        let br = get("br")?;
        let wn = get("wn")?;
        let un = get("un")?;
        let bn = get("bn")?;
        let hidden = g.shape(bz)[0];
        Ok(GruVars { wz, uz, bz, wr, ur, br, wn, un, bn, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, g: &mut Graph) -> Var {
        g.constant_vec(vec![0.0; self.hidden])
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let gate = |g: &mut Graph, w: Var, u: Var, bias: Var| -> Result<Var> {
            let wx = g.matmul(w, x)?;
            let uh = g.matmul(u, h)?;
            let pre = g.add_n(&[wx, uh, bias])?;
            Ok(g.sigmoid(pre))
        };
        let z = gate(g, self.wz, self.uz, self.bz)?;
        let r = gate(g, self.wr, self.ur, self.br)?;
        let wx = g.matmul(self.wn, x)?;
        let uh = g.matmul(self.un, h)?;
        let gated = g.mul(r, uh)?;
        let pre = g.add_n(&[wx, self.bn, gated])?;
        let n = g.tanh(pre);
        let diff = g.sub(h, n)?;
        let kept = g.mul(z, diff)?;
        g.add(n, kept)
    }
}

/// Encoder outputs prepared for one attention module.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// `[L, d]` hidden vectors.
    pub h: Var,
    /// `[L, a]` memory-side projection `h W_m`.
    pub proj: Var,
    pub len: usize,
}

/// Additive attention: `score_l = v · tanh(W_q s + W_m h_l)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    wq: Var,
    wm: Var,
    v: Var,
}

impl AttentionVars {
    pub fn bind(g: &mut Graph, b: &mut Binder, prefix: &str) -> Result<Self> {
        Ok(AttentionVars {
            wq: b.bind(g, &format!("{prefix}.wq"))?,
            wm: b.bind(g, &format!("{prefix}.wm"))?,
            v: b.bind(g, &format!("{prefix}.v"))?,
        })
    }

    pub fn memory(&self, g: &mut Graph, h: Var) -> Result<Memory> {
        let len = g.shape(h)[0];
        let proj = g.matmul(h, self.wm)?;
        Ok(Memory { h, proj, len })
    }

    /// Returns `(alpha, context)`.
    pub fn attend(&self, g: &mut Graph, mem: &Memory, s: Var) -> Result<(Var, Var)> {
        let q = g.matmul(self.wq, s)?;
        let pre = g.add_row(mem.proj, q)?;
        let e = g.tanh(pre);
        let scores = g.matmul(e, self.v)?;
        let alpha = g.softmax(scores)?;
        let context = g.matmul(alpha, mem.h)?;
        Ok((alpha, context))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    w: Var,
    b: Var,
}

impl OutputVars {
    pub fn bind(g: &mut Graph, b: &mut Binder, prefix: &str) -> Result<Self> {
        Ok(OutputVars { w: b.bind(g, &format!("{prefix}.w"))?, b: b.bind(g, &format!("{prefix}.b"))? })
    }

    pub fn logits(&self, g: &mut Graph, parts: &[Var]) -> Result<Var> {
        let input = g.concat(parts)?;
        let wx = g.matmul(self.w, input)?;
        g.add(wx, self.b)
    }
}

/// Shape-`[rows, width]` embedding table.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    table: Var,
    rows: usize,
}

impl EmbeddingVars {
    pub fn bind(g: &mut Graph, b: &mut Binder, prefix: &str) -> Result<Self> {
        let table = b.bind(g, &format!("{prefix}.emb"))?;
        let rows = g.shape(table)[0];
        Ok(EmbeddingVars { table, rows })
    }

    pub fn lookup(&self, g: &mut Graph, id: usize) -> Result<Var> {
        g.row(self.table, id)
    }

    /// Embeds a (possibly relaxed) distribution over the first `weights.len()`
    /// rows; missing trailing rows get weight zero.
    pub fn mix(&self, g: &mut Graph, weights: Var) -> Result<Var> {
        let n = g.shape(weights)[0];
        let w = if n < self.rows {
            let pad = g.constant_vec(vec![0.0; self.rows - n]);
            g.concat(&[weights, pad])?
        } else {
            weights
        };
        g.matmul(w, self.table)
    }
}

/// Encoder: embedding followed by a unidirectional gated recurrence.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub emb: EmbeddingVars,
    pub cell: GruVars,
}

impl EncoderVars {
    pub fn bind(g: &mut Graph, b: &mut Binder, prefix: &str) -> Result<Self> {
        Ok(EncoderVars { emb: EmbeddingVars::bind(g, b, prefix)?, cell: GruVars::bind(g, b, &format!("{prefix}.cell"))? })
    }

    /// Runs the recurrence over already-embedded inputs and stacks the states.
    pub fn run(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let mut h = self.cell.zero_state(g);
        let mut rows = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.cell.step(g, x, h)?;
            rows.push(h);
        }
        g.stack(&rows)
    }

    pub fn encode_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let inputs = ids.iter().map(|&i| self.emb.lookup(g, i)).collect::<Result<Vec<_>>>()?;
        self.run(g, &inputs)
    }
}
