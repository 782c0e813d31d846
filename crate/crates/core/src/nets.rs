//! Network definitions: the 2D U-Net slice detector with three zonal fusion
//! modes, and the anisotropic 3D U-Net zonal segmenter.
//!
//! Both nets share one topology: `depth` encoder levels of two conv+relu
//! with channel doubling and (2, 2, 1) max pooling, a two-conv bottleneck, a
//! mirrored decoder (nearest-neighbor upsample, skip concat, two conv+relu),
//! and a final 1x1 conv + channel softmax. The 3D variant keeps 3x3x1
//! kernels except in the bottleneck, which uses 3x3x3.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{substream, NormalSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Early,
    Late,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::None => "none",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet2DConfig {
    pub image_channels: usize,
    /// Zonal prior channels fed to the detector: P(TZ) and P(PZ).
    pub zonal_channels: usize,
    pub fusion_mode: FusionMode,
    pub depth: usize,
    pub base_filters: usize,
    pub out_classes: usize,
}

impl Default for UNet2DConfig {
    fn default() -> Self {
        UNet2DConfig {
            image_channels: 3,
            zonal_channels: 2,
            fusion_mode: FusionMode::None,
            depth: 3,
            base_filters: 16,
            out_classes: 2,
        }
    }
}

impl UNet2DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.depth == 0 || self.base_filters == 0 {
            return Err(Error::invalid("UNet2DConfig", "channels, depth, filters must be positive"));
        }
        if self.out_classes < 2 {
            return Err(Error::invalid("UNet2DConfig", "need at least two output classes"));
        }
        if self.fusion_mode != FusionMode::None && self.zonal_channels == 0 {
            return Err(Error::invalid("UNet2DConfig", "fusion requires zonal channels"));
        }
        Ok(())
    }

    /// Channels entering the first convolution.
    pub fn effective_input_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Early => self.image_channels + self.zonal_channels,
            _ => self.image_channels,
        }
    }

    /// Channels entering the final 1x1 convolution.
    pub fn head_input_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Late => self.base_filters + self.zonal_channels,
            _ => self.base_filters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet3DConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub out_classes: usize,
}

impl Default for UNet3DConfig {
    fn default() -> Self {
        UNet3DConfig { in_channels: 1, depth: 2, base_filters: 8, out_classes: 3 }
    }
}

impl UNet3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.depth == 0 || self.base_filters == 0 {
            return Err(Error::invalid("UNet3DConfig", "channels, depth, filters must be positive"));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// One convolution layer: indices into `Network::params` plus its spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub weight: usize,
    pub bias: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kx, ky, kz), all odd.
    pub kernel: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Level {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetConfig {
    Detector2d(UNet2DConfig),
    Zonal3d(UNet3DConfig),
}

/// A built U-Net: the ordered layer graph plus its parameter tensors.
/// Encoder level `i` is paired with decoder level `depth - 1 - i` through a
/// channel concat skip connection.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetConfig,
    pub seed: u64,
    pub encoder: Vec<Level>,
    pub bottleneck: Level,
    pub decoder: Vec<Level>,
    pub head: ConvLayer,
    pub params: Vec<Param>,
}

/// Pooling / upsampling factor used at every level: in-plane halving, z kept.
pub const POOL_FACTOR: [usize; 3] = [2, 2, 1];

struct NetBuilder {
    params: Vec<Param>,
    seed: u64,
    layer_counter: u64,
}

impl NetBuilder {
    fn new(seed: u64) -> Self {
        NetBuilder { params: Vec::new(), seed, layer_counter: 0 }
    }

    /// He-initialized conv layer: weights ~ N(0, 2 / fan_in), zero bias.
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: [usize; 3]) -> ConvLayer {
        let [kx, ky, kz] = kernel;
        let fan_in = in_c * kx * ky * kz;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = substream(self.seed, &[0x6e6574, self.layer_counter]);
        self.layer_counter += 1;
        let mut normal = NormalSource::new();
        let n = out_c * in_c * kx * ky * kz;
        let values: Vec<f64> = (0..n).map(|_| std * normal.sample(&mut rng)).collect();
        let weight_idx = self.params.len();
        self.params.push(Param {
            name: format!("{name}.weight"),
            shape: vec![out_c, in_c, kz, ky, kx],
            values,
        });
        let bias_idx = self.params.len();
        self.params.push(Param {
            name: format!("{name}.bias"),
            shape: vec![out_c],
            values: vec![0.0; out_c],
        });
        ConvLayer {
            name: name.to_owned(),
            weight: weight_idx,
            bias: bias_idx,
            in_channels: in_c,
            out_channels: out_c,
            kernel,
        }
    }

    fn level(&mut self, name: &str, in_c: usize, out_c: usize, kernel: [usize; 3]) -> Level {
        Level {
            conv1: self.conv(&format!("{name}.conv1"), in_c, out_c, kernel),
            conv2: self.conv(&format!("{name}.conv2"), out_c, out_c, kernel),
        }
    }
}

fn build_unet(
    config: NetConfig,
    seed: u64,
    input_channels: usize,
    depth: usize,
    base_filters: usize,
    out_classes: usize,
    level_kernel: [usize; 3],
    bottleneck_kernel: [usize; 3],
    head_extra_channels: usize,
) -> Network {
    let filters = |i: usize| base_filters << i;
    let mut b = NetBuilder::new(seed);
    let mut encoder = Vec::with_capacity(depth);
    for i in 0..depth {
        let in_c = if i == 0 { input_channels } else { filters(i - 1) };
        encoder.push(b.level(&format!("enc{i}"), in_c, filters(i), level_kernel));
    }
    let bottleneck = b.level("bottleneck", filters(depth - 1), filters(depth), bottleneck_kernel);
    let mut decoder = Vec::with_capacity(depth);
    for j in 0..depth {
        let skip = filters(depth - 1 - j);
        let in_c = filters(depth - j) + skip;
        decoder.push(b.level(&format!("dec{j}"), in_c, skip, level_kernel));
    }
    let head = b.conv("head", base_filters + head_extra_channels, out_classes, [1, 1, 1]);
    Network { config, seed, encoder, bottleneck, decoder, head, params: b.params }
}

/// Build the 2D slice detector. Early fusion widens the first convolution by
/// the zonal channels; late fusion widens the final 1x1 convolution instead.
pub fn build_unet2d(cfg: &UNet2DConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let head_extra = match cfg.fusion_mode {
        FusionMode::Late => cfg.zonal_channels,
        _ => 0,
    };
    Ok(build_unet(
        NetConfig::Detector2d(*cfg),
        seed,
        cfg.effective_input_channels(),
        cfg.depth,
        cfg.base_filters,
        cfg.out_classes,
        [3, 3, 1],
        [3, 3, 1],
        head_extra,
    ))
}

/// Build the anisotropic 3D zonal segmenter: 3x3x1 kernels and (2, 2, 1)
/// pooling everywhere except the deepest level, which uses 3x3x3.
pub fn build_unet3d_aniso(cfg: &UNet3DConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    Ok(build_unet(
        NetConfig::Zonal3d(*cfg),
        seed,
        cfg.in_channels,
        cfg.depth,
        cfg.base_filters,
        cfg.out_classes,
        [3, 3, 1],
        [3, 3, 3],
        0,
    ))
}

impl Network {
    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    /// Factor by which in-plane dims must be divisible for a forward pass.
    pub fn pooling_period(&self) -> usize {
        POOL_FACTOR[0].pow(self.depth() as u32)
    }

    pub fn fusion_mode(&self) -> FusionMode {
        match &self.config {
            NetConfig::Detector2d(c) => c.fusion_mode,
            NetConfig::Zonal3d(_) => FusionMode::None,
        }
    }

    pub fn out_classes(&self) -> usize {
        self.head.out_channels
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    fn conv_block(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        layer: &ConvLayer,
        x: NodeId,
    ) -> Result<NodeId> {
        let c = g.conv(x, params[layer.weight], params[layer.bias], layer.kernel)?;
        Ok(g.relu(c))
    }

    /// Run the full forward pass, returning the graph (for backward), the
    /// parameter leaf ids (aligned with `self.params`), and the softmax
    /// output node.
    pub fn forward(
        &self,
        graph: &mut Graph,
        input: Tensor,
        zonal: Option<Tensor>,
        trainable: bool,
    ) -> Result<ForwardPass> {
        match self.fusion_mode() {
            FusionMode::None => {
                if zonal.is_some() {
                    return Err(Error::invalid("forward", "zonal input given to a non-fusion net"));
                }
            }
            _ => {
                if zonal.is_none() {
                    return Err(Error::invalid("forward", "fusion net requires a zonal input"));
                }
            }
        }
        let g = graph;
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| g.leaf(Tensor::new(p.shape.clone(), p.values.clone()).unwrap(), trainable))
            .collect();

        let input_node = g.leaf(input, false);
        let zonal_node = match zonal {
            Some(z) => Some(g.leaf(z, false)),
            None => None,
        };

        let mut x = match self.fusion_mode() {
            FusionMode::Early => g.concat(input_node, zonal_node.unwrap())?,
            _ => input_node,
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = self.conv_block(g, &param_nodes, &level.conv1, x)?;
            x = self.conv_block(g, &param_nodes, &level.conv2, x)?;
            skips.push(x);
            x = g.maxpool(x, POOL_FACTOR)?;
        }
        x = self.conv_block(g, &param_nodes, &self.bottleneck.conv1, x)?;
        x = self.conv_block(g, &param_nodes, &self.bottleneck.conv2, x)?;
        for (j, level) in self.decoder.iter().enumerate() {
            x = g.upsample(x, POOL_FACTOR)?;
            x = g.concat(x, skips[self.encoder.len() - 1 - j])?;
            x = self.conv_block(g, &param_nodes, &level.conv1, x)?;
            x = self.conv_block(g, &param_nodes, &level.conv2, x)?;
        }
        if self.fusion_mode() == FusionMode::Late {
            x = g.concat(x, zonal_node.unwrap())?;
        }
        let logits = g.conv(x, param_nodes[self.head.weight], param_nodes[self.head.bias], self.head.kernel)?;
        let probs = g.softmax_channels(logits)?;
        Ok(ForwardPass { param_nodes, probs })
    }
}

pub struct ForwardPass {
    pub param_nodes: Vec<NodeId>,
    pub probs: NodeId,
}

/// Zero-pad an activation at the high end of x and y so both are divisible
/// by `period`. Returns the padded tensor and the original dims.
pub fn pad_to_period(t: &Tensor, period: usize) -> Result<(Tensor, [usize; 2])> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(Error::shape("pad_to_period", format!("activation expected, got {shape:?}")));
    }
    let (c, nz, ny, nx) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = |n: usize| n.div_ceil(period) * period;
    let (py, px) = (pad(ny), pad(nx));
    if (py, px) == (ny, nx) {
        return Ok((t.clone(), [nx, ny]));
    }
    let mut out = vec![0.0; c * nz * py * px];
    for ci in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                let src = ((ci * nz + z) * ny + y) * nx;
                let dst = ((ci * nz + z) * py + y) * px;
                out[dst..dst + nx].copy_from_slice(&t.values()[src..src + nx]);
            }
        }
    }
    Ok((Tensor::new(vec![c, nz, py, px], out)?, [nx, ny]))
}

/// Crop an activation back to the original (nx, ny).
pub fn crop_from_period(t: &Tensor, orig: [usize; 2]) -> Result<Tensor> {
    let shape = t.shape();
    let (c, nz, py, px) = (shape[0], shape[1], shape[2], shape[3]);
    let [nx, ny] = orig;
    if (py, px) == (ny, nx) {
        return Ok(t.clone());
    }
    let mut out = vec![0.0; c * nz * ny * nx];
    for ci in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                let src = ((ci * nz + z) * py + y) * px;
                let dst = ((ci * nz + z) * ny + y) * nx;
                out[dst..dst + nx].copy_from_slice(&t.values()[src..src + nx]);
            }
        }
    }
    Tensor::new(vec![c, nz, ny, nx], out)
}

/// Per-slice detector inference: returns the csPCa-class probability map
/// with the same spatial dims as the input slice. Pads to the pooling period
/// and crops back, so arbitrary in-plane dims are accepted.
pub fn forward_detector(
    net: &Network,
    slice_channels: &Tensor,
    zonal_slice: Option<&Tensor>,
) -> Result<Tensor> {
    let NetConfig::Detector2d(cfg) = &net.config else {
        return Err(Error::invalid("forward_detector", "not a detector network"));
    };
    let period = net.pooling_period();
    let (input, orig) = pad_to_period(slice_channels, period)?;
    let zonal = match zonal_slice {
        Some(z) => {
            let zs = z.shape();
            let is = slice_channels.shape();
            if zs[2..] != is[2..] {
                return Err(Error::shape(
                    "forward_detector",
                    format!("zonal dims {:?} != image dims {:?}", &zs[2..], &is[2..]),
                ));
            }
            Some(pad_to_period(z, period)?.0)
        }
        None => None,
    };
    let mut g = Graph::new();
    let pass = net.forward(&mut g, input, zonal, false)?;
    let shape = g.shape(pass.probs).to_vec();
    let (nz, py, px) = (shape[1], shape[2], shape[3]);
    let spatial = nz * py * px;
    // csPCa probability is the last class channel.
    let class = cfg.out_classes - 1;
    let vals = g.values(pass.probs)[class * spatial..(class + 1) * spatial].to_vec();
    let padded = Tensor::new(vec![1, nz, py, px], vals)?;
    crop_from_period(&padded, orig)
}

// --- checkpoint format -----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: NetConfig,
    seed: u64,
    epoch: usize,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    stem: String,
}

/// Write `<dir>/<name>.manifest.json` plus one raw little-endian f32 blob
/// per parameter tensor (`<name>.p<idx>.f32le`).
pub fn save_checkpoint(net: &Network, epoch: usize, dir: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(net.params.len());
    for (i, p) in net.params.iter().enumerate() {
        let stem = format!("{name}.p{i:03}");
        let path = dir.join(format!("{stem}.f32le"));
        let mut bytes = Vec::with_capacity(p.values.len() * 4);
        for &v in &p.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry { name: p.name.clone(), shape: p.shape.clone(), stem });
    }
    let manifest = CheckpointManifest {
        format: "unet-checkpoint-v1".to_owned(),
        config: net.config.clone(),
        seed: net.seed,
        epoch,
        params: entries,
    };
    let path = dir.join(format!("{name}.manifest.json"));
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Returns the network and
/// the stored epoch.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<(Network, usize)> {
    let path = dir.join(format!("{name}.manifest.json"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let mut net = match &manifest.config {
        NetConfig::Detector2d(cfg) => build_unet2d(cfg, manifest.seed)?,
        NetConfig::Zonal3d(cfg) => build_unet3d_aniso(cfg, manifest.seed)?,
    };
    if manifest.params.len() != net.params.len() {
        return Err(Error::Config(format!(
            "checkpoint {name} lists {} params, architecture has {}",
            manifest.params.len(),
            net.params.len()
        )));
    }
    for (entry, param) in manifest.params.iter().zip(net.params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.shape {
            return Err(Error::Config(format!(
                "checkpoint param {} (shape {:?}) does not match architecture param {} (shape {:?})",
                entry.name, entry.shape, param.name, param.shape
            )));
        }
        let blob_path = dir.join(format!("{}.f32le", entry.stem));
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() != param.values.len() * 4 {
            return Err(Error::Config(format!(
                "checkpoint blob {} holds {} bytes, expected {}",
                blob_path.display(),
                blob.len(),
                param.values.len() * 4
            )));
        }
        for (v, chunk) in param.values.iter_mut().zip(blob.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    Ok((net, manifest.epoch))
}
