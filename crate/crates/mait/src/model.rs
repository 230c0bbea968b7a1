//! Toy monolithic transformer classifier: patch embedding, class token,
//! positional embedding, pre-norm blocks (MHA + FFN, optional LayerScale,
//! stochastic depth), classifier head, checkpoint serialization, and an
//! AdamW optimizer with cosine schedule.
//!
//! Parameters are held in f64 but kept f32-representable at all times
//! (initialization and every optimizer step round to f32), so checkpoints,
//! which store raw f32, round-trip bit-exactly.

use crate::attention::{mha_forward_tape, MaskBinding};
use crate::error::{Error, Result};
use crate::maskgen::{
    build_mask, build_random_mask, AttentionMask, HeadMask, MaskKind, MaskScheme, PatchGrid,
};
use crate::metrics::AttentionRecord;
use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const LN_EPS: f64 = 1e-6;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub grid: PatchGrid,
    pub patch_px: usize,
    pub channels: usize,
    pub classes: usize,
    pub ffn_ratio: usize,
    /// Initial LayerScale diagonal; None disables LayerScale.
    pub layerscale_eps: Option<f64>,
    pub drop_path_rate: f64,
    pub scheme: MaskScheme,
    /// Seed for random-control masks in the scheme.
    pub mask_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_ratio < 1 {
            return Err(Error::Config("ffn_ratio must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config("drop_path_rate must be in [0, 1)".into()));
        }
        if self.scheme.layer_count() != self.layers || self.scheme.head_count() != self.heads {
            return Err(Error::Config(format!(
                "scheme is {}x{} but model is {}x{}",
                self.scheme.layer_count(),
                self.scheme.head_count(),
                self.layers,
                self.heads
            )));
        }
        Ok(())
    }

    /// N + 1.
    pub fn token_count(&self) -> usize {
        self.grid.tokens() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * self.channels
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.grid.rows * self.patch_px,
            self.grid.cols * self.patch_px,
            self.channels,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// (w_q, w_k, w_v) per head, each D x d.
    pub heads: Vec<(Tensor, Tensor, Tensor)>,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ls1: Option<Tensor>,
    pub ls2: Option<Tensor>,
    /// Soft-mask theta per head, present where the scheme says soft.
    pub soft_theta: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub patch_proj: Tensor,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub classifier: Tensor,
}

impl ModelParams {
    /// Ordered (name, tensor) listing; checkpoint and optimizer order.
    pub fn manifest(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("class_token".into(), &self.class_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &layer.ln1_bias));
            out.push((format!("layer{l}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &layer.ln2_bias));
            for (h, (wq, wk, wv)) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), wq));
                out.push((format!("layer{l}.head{h}.w_k"), wk));
                out.push((format!("layer{l}.head{h}.w_v"), wv));
            }
            out.push((format!("layer{l}.w_o"), &layer.w_o));
            out.push((format!("layer{l}.ffn_w1"), &layer.ffn_w1));
            out.push((format!("layer{l}.ffn_b1"), &layer.ffn_b1));
            out.push((format!("layer{l}.ffn_w2"), &layer.ffn_w2));
            out.push((format!("layer{l}.ffn_b2"), &layer.ffn_b2));
            if let Some(ls) = &layer.ls1 {
                out.push((format!("layer{l}.ls1"), ls));
            }
            if let Some(ls) = &layer.ls2 {
                out.push((format!("layer{l}.ls2"), ls));
            }
            for (h, theta) in layer.soft_theta.iter().enumerate() {
                if let Some(t) = theta {
                    out.push((format!("layer{l}.head{h}.theta"), t));
                }
            }
        }
        out.push(("classifier".into(), &self.classifier));
        out
    }

    pub fn manifest_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("class_token".into(), &mut self.class_token),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1_gain"), &mut layer.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &mut layer.ln1_bias));
            out.push((format!("layer{l}.ln2_gain"), &mut layer.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &mut layer.ln2_bias));
            for (h, (wq, wk, wv)) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), wq));
                out.push((format!("layer{l}.head{h}.w_k"), wk));
                out.push((format!("layer{l}.head{h}.w_v"), wv));
            }
            out.push((format!("layer{l}.w_o"), &mut layer.w_o));
            out.push((format!("layer{l}.ffn_w1"), &mut layer.ffn_w1));
            out.push((format!("layer{l}.ffn_b1"), &mut layer.ffn_b1));
            out.push((format!("layer{l}.ffn_w2"), &mut layer.ffn_w2));
            out.push((format!("layer{l}.ffn_b2"), &mut layer.ffn_b2));
            if let Some(ls) = &mut layer.ls1 {
                out.push((format!("layer{l}.ls1"), ls));
            }
            if let Some(ls) = &mut layer.ls2 {
                out.push((format!("layer{l}.ls2"), ls));
            }
            for (h, theta) in layer.soft_theta.iter_mut().enumerate() {
                if let Some(t) = theta {
                    out.push((format!("layer{l}.head{h}.theta"), t));
                }
            }
        }
        out.push(("classifier".into(), &mut self.classifier));
        out
    }

    pub fn total_values(&self) -> usize {
        self.manifest().iter().map(|(_, t)| t.len()).sum()
    }

    /// Learned alpha per (layer, head) for soft-masked heads.
    pub fn soft_alphas(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, theta) in layer.soft_theta.iter().enumerate() {
                if let Some(t) = theta {
                    out.push((l, h, crate::numerics::sigmoid(t.item())));
                }
            }
        }
        out
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller, resampled outside two sigma
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * sigma);
        }
    }
    Tensor::new(shape, data).expect("shape/data agree")
}

/// Truncated-normal (sigma 0.02) projections and embeddings, unit LN gains,
/// zero biases, LayerScale diagonals at layerscale_eps, theta = 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.hidden;
    let hd = config.head_dim();
    let sigma = 0.02;
    let layers = (0..config.layers)
        .map(|l| LayerParams {
            ln1_gain: Tensor::filled(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            heads: (0..config.heads)
                .map(|_| {
                    (
                        trunc_normal(&mut rng, vec![d, hd], sigma),
                        trunc_normal(&mut rng, vec![d, hd], sigma),
                        trunc_normal(&mut rng, vec![d, hd], sigma),
                    )
                })
                .collect(),
            w_o: trunc_normal(&mut rng, vec![d, d], sigma),
            ffn_w1: trunc_normal(&mut rng, vec![d, d * config.ffn_ratio], sigma),
            ffn_b1: Tensor::zeros(vec![d * config.ffn_ratio]),
            ffn_w2: trunc_normal(&mut rng, vec![d * config.ffn_ratio, d], sigma),
            ffn_b2: Tensor::zeros(vec![d]),
            ls1: config.layerscale_eps.map(|e| Tensor::filled(vec![d], e)),
            ls2: config.layerscale_eps.map(|e| Tensor::filled(vec![d], e)),
            soft_theta: config.scheme.layers[l]
                .iter()
                .map(|hm| matches!(hm, HeadMask::Soft { .. }).then(|| Tensor::scalar(0.0)))
                .collect(),
        })
        .collect();
    let mut params = ModelParams {
        patch_proj: trunc_normal(&mut rng, vec![config.patch_dim(), d], sigma),
        class_token: trunc_normal(&mut rng, vec![1, d], sigma),
        pos_embed: trunc_normal(&mut rng, vec![config.token_count(), d], sigma),
        layers,
        classifier: trunc_normal(&mut rng, vec![d, config.classes], sigma),
    };
    for (_, t) in params.manifest_mut() {
        t.snap_f32();
    }
    Ok(params)
}

/// Builds the per-layer, per-head masks the scheme calls for.
pub fn compile_masks(config: &ModelConfig) -> Result<Vec<Vec<Option<AttentionMask>>>> {
    config
        .scheme
        .layers
        .iter()
        .enumerate()
        .map(|(l, row)| {
            row.iter()
                .enumerate()
                .map(|(h, hm)| match hm {
                    HeadMask::None => Ok(None),
                    HeadMask::Hard { r } => {
                        build_mask(config.grid, MaskKind::Hard, *r).map(Some)
                    }
                    HeadMask::Soft { r } => {
                        build_mask(config.grid, MaskKind::Soft, *r).map(Some)
                    }
                    HeadMask::Random { r } => {
                        let keep = (r * r).min(config.grid.tokens());
                        build_random_mask(
                            config.grid,
                            keep,
                            config.mask_seed
                                .wrapping_add((l * 31 + h) as u64),
                        )
                        .map(Some)
                    }
                })
                .collect()
        })
        .collect()
}

/// Flattens the image (rows*patch_px x cols*patch_px x channels, row-major
/// [h][w][c]) into an N x (patch_px^2 * channels) patch matrix, patches in
/// row-major grid order.
pub fn extract_patches(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (ih, iw, ic) = config.image_shape();
    if image.shape() != [ih, iw, ic] {
        return Err(Error::dim(format!(
            "image shape {:?} does not match config {:?} (grid x patch_px, channels)",
            image.shape(),
            (ih, iw, ic)
        )));
    }
    let p = config.patch_px;
    let n = config.grid.tokens();
    let pd = config.patch_dim();
    let mut out = Tensor::zeros(vec![n, pd]);
    for gr in 0..config.grid.rows {
        for gc in 0..config.grid.cols {
            let patch = gr * config.grid.cols + gc;
            let mut k = 0;
            for pr in 0..p {
                for pc in 0..p {
                    for c in 0..ic {
                        let idx = ((gr * p + pr) * iw + (gc * p + pc)) * ic + c;
                        out.set(patch, k, image.data()[idx]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patch embedding on plain tensors: project, prepend class token, add
/// positional embedding.
pub fn patch_embed(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let patches = extract_patches(image, config)?;
    let projected = patches.matmul(&params.patch_proj)?;
    let t = config.token_count();
    let d = config.hidden;
    let mut x = Tensor::zeros(vec![t, d]);
    x.data_mut()[..d].copy_from_slice(params.class_token.data());
    x.data_mut()[d..].copy_from_slice(projected.data());
    x.add(&params.pos_embed)
}

/// Per-layer residual-branch scales for stochastic depth. Scale is 0 when
/// the branch is dropped, 1/(1-p) when kept, 1 in eval mode.
#[derive(Debug, Clone)]
pub struct DropPlan {
    /// (mha_scale, ffn_scale) per layer.
    pub scales: Vec<(f64, f64)>,
}

impl DropPlan {
    pub fn eval(layers: usize) -> Self {
        DropPlan {
            scales: vec![(1.0, 1.0); layers],
        }
    }

    /// Linear stochastic depth: layer l drops with rate * l / (L - 1).
    pub fn sample(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let l = config.layers;
        let scales = (0..l)
            .map(|i| {
                let p = if l > 1 {
                    config.drop_path_rate * i as f64 / (l - 1) as f64
                } else {
                    0.0
                };
                let mut pick = || {
                    if p > 0.0 && rng.gen_range(0.0..1.0) < p {
                        0.0
                    } else {
                        1.0 / (1.0 - p)
                    }
                };
                (pick(), pick())
            })
            .collect();
        DropPlan { scales }
    }
}

/// Tape handles for every parameter, in the same order as
/// [`ModelParams::manifest`].
pub struct ParamVars {
    pub vars: Vec<Var>,
    pub names: Vec<String>,
}

impl ParamVars {
    pub fn by_name(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }
}

pub struct ForwardGraph {
    pub tape: Tape,
    pub logits: Var,
    /// Present when a label was supplied.
    pub loss: Option<Var>,
    /// maps[layer][head] attention-map vars.
    pub maps: Vec<Vec<Var>>,
    pub params: ParamVars,
}

struct LayerVarRefs {
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    heads: Vec<(Var, Var, Var)>,
    w_o: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
    ls1: Option<Var>,
    ls2: Option<Var>,
    soft_theta: Vec<Option<Var>>,
}

/// Builds the full forward graph on a fresh tape. The caller reads values
/// from `tape` and runs `backward` on `loss` for gradients.
pub fn build_forward(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &[Vec<Option<AttentionMask>>],
    image: &Tensor,
    label: Option<usize>,
    drop: &DropPlan,
) -> Result<ForwardGraph> {
    let mut tape = Tape::new();

    // leaf every parameter in manifest order
    let manifest = params.manifest();
    let names: Vec<String> = manifest.iter().map(|(n, _)| n.clone()).collect();
    let vars: Vec<Var> = manifest.iter().map(|(_, t)| tape.leaf((*t).clone())).collect();
    let pv = ParamVars { vars, names };
    let get = |name: &str| pv.by_name(name).expect("manifest name");

    let mut layer_refs = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        layer_refs.push(LayerVarRefs {
            ln1_gain: get(&format!("layer{l}.ln1_gain")),
            ln1_bias: get(&format!("layer{l}.ln1_bias")),
            ln2_gain: get(&format!("layer{l}.ln2_gain")),
            ln2_bias: get(&format!("layer{l}.ln2_bias")),
            heads: (0..config.heads)
                .map(|h| {
                    (
                        get(&format!("layer{l}.head{h}.w_q")),
                        get(&format!("layer{l}.head{h}.w_k")),
                        get(&format!("layer{l}.head{h}.w_v")),
                    )
                })
                .collect(),
            w_o: get(&format!("layer{l}.w_o")),
            ffn_w1: get(&format!("layer{l}.ffn_w1")),
            ffn_b1: get(&format!("layer{l}.ffn_b1")),
            ffn_w2: get(&format!("layer{l}.ffn_w2")),
            ffn_b2: get(&format!("layer{l}.ffn_b2")),
            ls1: params.layers[l].ls1.as_ref().map(|_| get(&format!("layer{l}.ls1"))),
            ls2: params.layers[l].ls2.as_ref().map(|_| get(&format!("layer{l}.ls2"))),
            soft_theta: (0..config.heads)
                .map(|h| {
                    params.layers[l].soft_theta[h]
                        .as_ref()
                        .map(|_| get(&format!("layer{l}.head{h}.theta")))
                })
                .collect(),
        });
    }

    // embedding
    let patches = extract_patches(image, config)?;
    let patches_v = tape.leaf(patches);
    let projected = tape.matmul(patches_v, get("patch_proj"))?;
    let tokens = tape.concat_rows(get("class_token"), projected)?;
    let mut x = tape.add(tokens, get("pos_embed"))?;

    // blocks
    let mut all_maps = Vec::with_capacity(config.layers);
    for (l, refs) in layer_refs.iter().enumerate() {
        let (mha_scale, ffn_scale) = drop.scales[l];

        let normed = tape.layernorm(x, refs.ln1_gain, refs.ln1_bias, LN_EPS)?;
        let bindings: Vec<MaskBinding> = masks[l]
            .iter()
            .enumerate()
            .map(|(h, m)| match m {
                None => MaskBinding::None,
                Some(mask) if mask.kind == MaskKind::Soft => MaskBinding::Soft {
                    binary: mask.dense(),
                    theta: refs.soft_theta[h].expect("soft head has theta"),
                },
                Some(mask) => MaskBinding::Const(mask.dense()),
            })
            .collect();
        let (mut branch, maps) =
            mha_forward_tape(&mut tape, normed, &refs.heads, refs.w_o, &bindings)?;
        all_maps.push(maps);
        if let Some(ls) = refs.ls1 {
            branch = tape.mul_row_broadcast(branch, ls)?;
        }
        if mha_scale != 1.0 {
            branch = tape.scale(branch, mha_scale);
        }
        x = tape.add(x, branch)?;

        let normed2 = tape.layernorm(x, refs.ln2_gain, refs.ln2_bias, LN_EPS)?;
        let hidden = tape.matmul(normed2, refs.ffn_w1)?;
        let hidden = tape.add_row_broadcast(hidden, refs.ffn_b1)?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, refs.ffn_w2)?;
        let mut ffn = tape.add_row_broadcast(out, refs.ffn_b2)?;
        if let Some(ls) = refs.ls2 {
            ffn = tape.mul_row_broadcast(ffn, ls)?;
        }
        if ffn_scale != 1.0 {
            ffn = tape.scale(ffn, ffn_scale);
        }
        x = tape.add(x, ffn)?;
    }

    // class-token readout
    let cls = tape.slice_rows(x, 0, 1);
    let logits = tape.matmul(cls, get("classifier"))?;
    let loss = match label {
        Some(lbl) => Some(tape.cross_entropy(logits, lbl)?),
        None => None,
    };

    Ok(ForwardGraph {
        tape,
        logits,
        loss,
        maps: all_maps,
        params: pv,
    })
}

/// Eval-mode forward pass. Returns logits and, when requested, the captured
/// attention record.
pub fn forward(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    capture: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    let masks = compile_masks(config)?;
    forward_with_masks(image, params, config, &masks, capture)
}

/// Like [`forward`] but with pre-compiled masks (hot path for eval loops).
pub fn forward_with_masks(
    image: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
    masks: &[Vec<Option<AttentionMask>>],
    capture: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    let graph = build_forward(
        config,
        params,
        masks,
        image,
        None,
        &DropPlan::eval(config.layers),
    )?;
    let logits = graph.tape.value(graph.logits).clone();
    let record = capture.then(|| AttentionRecord {
        maps: graph
            .maps
            .iter()
            .map(|layer| layer.iter().map(|&m| graph.tape.value(m).clone()).collect())
            .collect(),
        grid: config.grid,
        scheme: config.scheme.clone(),
    });
    Ok((logits, record))
}

// --- checkpoint serialization ---

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let manifest = params.manifest();
    let mut entries = Vec::with_capacity(manifest.len());
    let mut offset = 0u64;
    for (name, t) in &manifest {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = CheckpointHeader {
        config: config.clone(),
        tensors: entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, t) in &manifest {
        for &v in t.data() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file shorter than preamble".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)
        .map_err(|_| Error::Checkpoint("truncated version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} unsupported (want {CHECKPOINT_VERSION})"
        )));
    }
    f.read_exact(&mut u32buf)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    header.config.validate()?;

    // read tensors in manifest order into a skeleton built from the config
    let mut params = init_params(&header.config, 0)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    for (name, t) in params.manifest() {
        expected.push((name, t.shape().to_vec()));
    }
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Checkpoint("tensor manifest does not match config".into()));
    }
    for (_, t) in params.manifest_mut() {
        let mut buf = vec![0u8; 4 * t.len()];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated tensor data".into()))?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            t.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((params, header.config))
}

// --- optimizer ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total steps for the cosine schedule.
    pub total_steps: usize,
    /// Linear warmup steps before the cosine decay begins.
    pub warmup_steps: usize,
}

impl OptimizerConfig {
    /// Toy-scale defaults; lr follows the 0.0005 * batch / 512 rule.
    pub fn with_batch(batch: usize, total_steps: usize) -> Self {
        OptimizerConfig {
            lr: 5e-4 * batch as f64 / 512.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            warmup_steps: total_steps / 20,
        }
    }
}

/// AdamW with decoupled weight decay and a cosine learning-rate schedule.
pub struct AdamW {
    cfg: OptimizerConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ModelParams) -> Self {
        let shapes: Vec<Tensor> = params
            .manifest()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let warmup = self.cfg.warmup_steps;
        if self.step < warmup {
            return self.cfg.lr * (self.step + 1) as f64 / warmup as f64;
        }
        let t = (self.step - warmup).min(self.cfg.total_steps) as f64;
        let total = self.cfg.total_steps.saturating_sub(warmup).max(1) as f64;
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t / total).cos())
    }

    /// Applies one update. `grads` must align with the manifest order.
    /// Parameters are snapped to f32 precision after the update.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let b1c = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let mut manifest = params.manifest_mut();
        if manifest.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                manifest.len()
            )));
        }
        for (i, (name, t)) in manifest.iter_mut().enumerate() {
            // no decay on norms, biases, scales, theta
            let decay = if name.contains("bias")
                || name.contains("gain")
                || name.contains("ls")
                || name.contains("theta")
                || name == "class_token"
                || name == "pos_embed"
            {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let g = grads[i].data();
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let m = &mut self.m[i].data_mut()[j];
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g[j];
                let v = &mut self.v[i].data_mut()[j];
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = *m / b1c;
                let vhat = *v / b2c;
                *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *p);
            }
            t.snap_f32();
        }
        Ok(())
    }
}
