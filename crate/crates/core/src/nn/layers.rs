use candle_core::{DType, Tensor, Var, D};

use crate::error::Result;
use crate::nn::ops;
use crate::nn::params::{Group, Init, ParamStore};

/// `y = x W + b` over the last dimension; `W` is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
    out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: Group) -> Result<Self> {
        Self::with_init(ps, name, in_dim, out_dim, Init::fan_in(in_dim), Some(Init::Const(0.0)), group)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
        group: Group,
    ) -> Result<Self> {
        let weight = ps.create(&format!("{name}.weight"), &[in_dim, out_dim], weight_init, group)?;
        let bias = match bias_init {
            Some(init) => Some(ps.create(&format!("{name}.bias"), &[out_dim], init, group)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            out_dim,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input has at least one dim");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, in_dim))?.matmul(self.weight.as_tensor())?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, group: Group) -> Result<Self> {
        Ok(Self {
            gamma: ps.create(&format!("{name}.gamma"), &[dim], Init::Const(1.0), group)?,
            beta: ps.create(&format!("{name}.beta"), &[dim], Init::Const(0.0), group)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Var,
    dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, rows: usize, dim: usize, group: Group) -> Result<Self> {
        Ok(Self {
            table: ps.create(name, &[rows, dim], Init::Normal(0.02), group)?,
            dim,
        })
    }

    /// Rows for `ids` (any shape, u32); output appends the embedding dimension.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.as_tensor().index_select(&flat, 0)?;
        dims.push(self.dim);
        Ok(rows.reshape(dims)?)
    }

    pub fn table(&self) -> &Var {
        &self.table
    }
}

/// Additive causal mask `(L, L)`: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0f32; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(m, (len, len), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (n, l, w) = x.dims3()?;
        let dh = w / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, l, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = ops::softmax_last(&att.broadcast_add(mask)?)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((n, l, w))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

/// Pre-norm causal transformer stack with a final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Transformer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: TransformerConfig, group: Group) -> Result<Self> {
        let w = cfg.width;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("{name}.block{i}");
            let hidden = w * cfg.mlp_ratio;
            blocks.push(Block {
                ln1: LayerNorm::new(ps, &format!("{p}.ln1"), w, group)?,
                attn: SelfAttention {
                    qkv: Linear::new(ps, &format!("{p}.attn.qkv"), w, 3 * w, group)?,
                    out: Linear::with_init(
                        ps,
                        &format!("{p}.attn.out"),
                        w,
                        w,
                        Init::Uniform(1.0 / ((w * cfg.layers) as f64).sqrt()),
                        Some(Init::Const(0.0)),
                        group,
                    )?,
                    heads: cfg.heads,
                },
                ln2: LayerNorm::new(ps, &format!("{p}.ln2"), w, group)?,
                fc1: Linear::new(ps, &format!("{p}.mlp.fc1"), w, hidden, group)?,
                fc2: Linear::with_init(
                    ps,
                    &format!("{p}.mlp.fc2"),
                    hidden,
                    w,
                    Init::Uniform(1.0 / ((hidden * cfg.layers) as f64).sqrt()),
                    Some(Init::Const(0.0)),
                    group,
                )?,
            });
        }
        Ok(Self {
            blocks,
            ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), w, group)?,
        })
    }

    /// Causal forward over `(N, L, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        let mask = causal_mask(l, x.dtype(), x.device())?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, &mask)?;
        }
        self.ln_f.forward(&h)
    }
}
