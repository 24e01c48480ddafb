//! Shared per-point networks: the saliency correction net, the two-branch
//! bimanual saliency net, the contact classifier, and the refinement net.
//!
//! Every network is a stack of dense layers applied to each point
//! independently. Encoders additionally max-pool the last layer into a
//! global feature, replicate it per point, and concatenate it with the
//! first-layer features before decoding.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Tensor, Var};
use crate::error::{check_len, Error, Result};
use crate::geom::{ContactLabels, Label, PointCloud, SaliencyMap};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"BGSW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Layer widths shared by every encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Per-point encoder widths after the input layer. The first entry is
    /// the width of the skip feature concatenated into the decoder input.
    pub encoder_widths: Vec<usize>,
    /// Decoder hidden widths; the output width is set by the head.
    pub decoder_widths: Vec<usize>,
    pub refine_widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            encoder_widths: vec![64, 128, 256, 512, 1024],
            decoder_widths: vec![512, 256, 128],
            refine_widths: vec![64, 64],
            hidden_activation: Activation::Relu,
        }
    }
}

impl NetConfig {
    /// A narrow variant for desk-scale experiments and tests.
    pub fn compact() -> Self {
        NetConfig {
            encoder_widths: vec![64, 64, 128],
            decoder_widths: vec![128, 64, 32],
            refine_widths: vec![64, 64],
            hidden_activation: Activation::Relu,
        }
    }

    /// A very small smooth network, handy for gradient checks.
    pub fn tiny_smooth() -> Self {
        NetConfig {
            encoder_widths: vec![8, 12],
            decoder_widths: vec![10, 8, 6],
            refine_widths: vec![8, 8],
            hidden_activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() || self.refine_widths.is_empty() {
            return Err(Error::InvalidArgument("every network needs at least one hidden layer".into()));
        }
        if [&self.encoder_widths, &self.decoder_widths, &self.refine_widths]
            .iter()
            .any(|w| w.contains(&0))
        {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the decoder input: skip feature plus global feature.
    pub fn combined_width(&self) -> usize {
        self.encoder_widths[0] + self.encoder_widths[self.encoder_widths.len() - 1]
    }
}

/// One affine layer, `in x out` weight plus `out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        let bias = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Dense {
            weight: Tensor::matrix(fan_in, fan_out, weight).expect("sized"),
            bias: Tensor::vector(bias),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of dense layers; `hidden` after every layer but the last,
/// `output` after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn init(widths: &[usize], hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Mlp { layers, hidden, output }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Zeroes the final layer so the pre-activation output is exactly 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        MlpVars {
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Plain forward pass without a graph, row by row. Used as an
    /// independent check on the graph path.
    pub fn forward_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let act = |a: Activation, v: f64| match a {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        };
        rows.iter()
            .map(|row| {
                let mut h = row.clone();
                for (li, l) in self.layers.iter().enumerate() {
                    let (fi, fo) = (l.fan_in(), l.fan_out());
                    let mut out = l.bias.data().to_vec();
                    for (j, o) in out.iter_mut().enumerate() {
                        for k in 0..fi {
                            *o += h[k] * l.weight.data()[k * fo + j];
                        }
                    }
                    let a = if li + 1 == self.layers.len() { self.output } else { self.hidden };
                    h = out.into_iter().map(|v| act(a, v)).collect();
                }
                h
            })
            .collect()
    }
}

/// Graph handles for an [`Mlp`]'s parameters.
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    hidden: Activation,
    output: Activation,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn layer(&self, g: &mut Graph, x: Var, i: usize) -> Result<Var> {
        let (w, b) = self.layers[i];
        let y = g.linear(x, w, b)?;
        let act = if i + 1 == self.layers.len() { self.output } else { self.hidden };
        g.activate(y, act)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers.len() {
            h = self.layer(g, h, i)?;
        }
        Ok(h)
    }

    /// Encoder pass: per-point features, max-pooled global feature, and
    /// the decoder input `[first-layer feature | replicated global]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Encoded> {
        let n = g.value(x).rows();
        let first = self.layer(g, x, 0)?;
        let mut h = first;
        for i in 1..self.layers.len() {
            h = self.layer(g, h, i)?;
        }
        let global = g.max_pool_points(h)?;
        let rep = g.repeat_rows(global, n)?;
        let combined = g.concat_features(first, rep)?;
        Ok(Encoded {
            first,
            global,
            combined,
        })
    }
}

pub struct Encoded {
    pub first: Var,
    pub global: Var,
    pub combined: Var,
}

/// Encoder/decoder pair. The encoder applies the hidden activation on every
/// layer, including the one feeding the max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl EncoderDecoder {
    fn init(cfg: &NetConfig, in_channels: usize, out: usize, head: Activation, rng: &mut ChaCha8Rng) -> Self {
        let mut enc = vec![in_channels];
        enc.extend(&cfg.encoder_widths);
        let mut dec = vec![cfg.combined_width()];
        dec.extend(&cfg.decoder_widths);
        dec.push(out);
        let act = cfg.hidden_activation;
        EncoderDecoder {
            encoder: Mlp::init(&enc, act, act, rng),
            decoder: Mlp::init(&dec, act, head, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.encoder.in_width()
    }

    pub fn out_width(&self) -> usize {
        self.decoder.out_width()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderDecoderVars {
        EncoderDecoderVars {
            encoder: self.encoder.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
        }
    }
}

pub struct EncoderDecoderVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
}

impl EncoderDecoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    /// `N x in` input to `N x m` output.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let enc = self.encoder.encode(g, input)?;
        self.decoder.forward(g, enc.combined)
    }
}

/// Corrects the single-handed map: `S = clamp(S_o + S_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionNet {
    pub net: EncoderDecoder,
}

/// Two encoder/decoder branches: displacement field `V` from the cloud and
/// saliency adjustment `dS` from the cloud plus current saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct BimanualSaliencyNet {
    pub vectors: EncoderDecoder,
    pub adjust: EncoderDecoder,
}

/// Per-point 3-class contact classifier over `[xyz, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactNet {
    pub net: EncoderDecoder,
}

/// Per-point adjustment `R` over `[xyz, b, one-hot label]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineNet {
    pub mlp: Mlp,
}

impl RefineNet {
    pub const IN_CHANNELS: usize = 7;

    /// Hidden layers get the usual init; the head starts at zero so the
    /// initial adjustment is exactly zero.
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![Self::IN_CHANNELS];
        widths.extend(&cfg.refine_widths);
        widths.push(1);
        let mut mlp = Mlp::init(&widths, cfg.hidden_activation, Activation::Tanh, rng);
        mlp.zero_output_layer();
        RefineNet { mlp }
    }
}

/// Every trained parameter of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub version: u32,
    pub cm: CorrectionNet,
    pub bspn: BimanualSaliencyNet,
    pub bcpn: ContactNet,
    pub refine: RefineNet,
}

/// Which parameter groups an optimizer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Correction,
    Joint,
    Refine,
}

impl ModelWeights {
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights {
            version: WEIGHTS_FORMAT_VERSION,
            cm: CorrectionNet {
                net: EncoderDecoder::init(cfg, 4, 1, Activation::Tanh, &mut rng),
            },
            bspn: BimanualSaliencyNet {
                vectors: EncoderDecoder::init(cfg, 3, 3, Activation::Identity, &mut rng),
                adjust: EncoderDecoder::init(cfg, 4, 1, Activation::Tanh, &mut rng),
            },
            bcpn: ContactNet {
                net: EncoderDecoder::init(cfg, 4, 3, Activation::Identity, &mut rng),
            },
            refine: RefineNet::init(cfg, &mut rng),
        };
        // Untrained weights leave every map unchanged: S = S_o and B = S.
        w.cm.net.decoder.zero_output_layer();
        w.bspn.adjust.decoder.zero_output_layer();
        Ok(w)
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Correction => self.cm.net.params(),
            ParamGroup::Joint => {
                let mut p = self.bspn.vectors.params();
                p.extend(self.bspn.adjust.params());
                p.extend(self.bcpn.net.params());
                p
            }
            ParamGroup::Refine => self.refine.mlp.params(),
        }
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Correction => self.cm.net.params_mut(),
            ParamGroup::Joint => {
                let mut p = self.bspn.vectors.params_mut();
                p.extend(self.bspn.adjust.params_mut());
                p.extend(self.bcpn.net.params_mut());
                p
            }
            ParamGroup::Refine => self.refine.mlp.params_mut(),
        }
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let parts: [(&str, &Mlp); 9] = [
            ("cm.encoder", &self.cm.net.encoder),
            ("cm.decoder", &self.cm.net.decoder),
            ("bspn.vectors.encoder", &self.bspn.vectors.encoder),
            ("bspn.vectors.decoder", &self.bspn.vectors.decoder),
            ("bspn.adjust.encoder", &self.bspn.adjust.encoder),
            ("bspn.adjust.decoder", &self.bspn.adjust.decoder),
            ("bcpn.encoder", &self.bcpn.net.encoder),
            ("bcpn.decoder", &self.bcpn.net.decoder),
            ("refine", &self.refine.mlp),
        ];
        let mut out = Vec::new();
        for (prefix, mlp) in parts {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn hidden_activation(&self) -> Activation {
        self.cm.net.encoder.hidden
    }

    /// Serializes to the `BGSW` container: magic, `u32` format version,
    /// `u32` header length, a text header of tensor names and shapes, then
    /// little-endian `f32` values in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named();
        let mut header = String::from("bisal-weights\n");
        header.push_str(&format!("hidden_activation {}\n", self.hidden_activation().name()));
        for (name, t) in &named {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &named {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::format("weights", m);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("truncated magic"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| fail("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != WEIGHTS_FORMAT_VERSION {
            return Err(fail(&format!("unsupported format version {version}")));
        }
        r.read_exact(&mut word).map_err(|_| fail("truncated header length"))?;
        let hlen = u32::from_le_bytes(word) as usize;
        if r.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header = std::str::from_utf8(&r[..hlen]).map_err(|_| fail("header is not UTF-8"))?;
        let mut blob = &r[hlen..];

        let mut lines = header.lines();
        if lines.next() != Some("bisal-weights") {
            return Err(fail("missing header tag"));
        }
        let mut activation = None;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("hidden_activation") => {
                    let name = parts.next().ok_or_else(|| fail("missing activation"))?;
                    activation = Some(Activation::parse(name).ok_or_else(|| fail("unknown activation"))?);
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| fail("missing tensor name"))?.to_string();
                    let shape = parts
                        .map(|d| d.parse::<usize>().map_err(|_| fail("bad dimension")))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    if blob.len() < 4 * n {
                        return Err(fail("truncated tensor data"));
                    }
                    let data = blob[..4 * n]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                        .collect();
                    blob = &blob[4 * n..];
                    if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                        return Err(fail(&format!("duplicate tensor {name}")));
                    }
                }
                Some(other) => return Err(fail(&format!("unknown header entry {other}"))),
                None => {}
            }
        }
        if !blob.is_empty() {
            return Err(fail("trailing bytes after tensor data"));
        }
        let act = activation.ok_or_else(|| fail("missing hidden_activation"))?;

        let mut take = |prefix: &str, output: Activation| -> Result<Mlp> {
            let mut layers = Vec::new();
            while let Some(weight) = tensors.remove(&format!("{prefix}.{}.weight", layers.len())) {
                let bias = tensors
                    .remove(&format!("{prefix}.{}.bias", layers.len()))
                    .ok_or_else(|| fail(&format!("{prefix} layer missing bias")))?;
                if weight.shape().len() != 2 || bias.shape() != [weight.cols()] {
                    return Err(fail(&format!("{prefix}: inconsistent layer shapes")));
                }
                layers.push(Dense { weight, bias });
            }
            if layers.is_empty() {
                return Err(fail(&format!("missing network {prefix}")));
            }
            if layers.windows(2).any(|w| w[0].fan_out() != w[1].fan_in()) {
                return Err(fail(&format!("{prefix}: layer widths do not chain")));
            }
            Ok(Mlp {
                layers,
                hidden: act,
                output,
            })
        };
        let pair = |enc: Mlp, dec: Mlp| -> Result<EncoderDecoder> {
            let skip = enc.layers[0].fan_out();
            if dec.in_width() != skip + enc.out_width() {
                return Err(fail("decoder input width does not match encoder features"));
            }
            Ok(EncoderDecoder {
                encoder: enc,
                decoder: dec,
            })
        };
        let cm = pair(take("cm.encoder", act)?, take("cm.decoder", Activation::Tanh)?)?;
        let vectors = pair(take("bspn.vectors.encoder", act)?, take("bspn.vectors.decoder", Activation::Identity)?)?;
        let adjust = pair(take("bspn.adjust.encoder", act)?, take("bspn.adjust.decoder", Activation::Tanh)?)?;
        let bcpn = pair(take("bcpn.encoder", act)?, take("bcpn.decoder", Activation::Identity)?)?;
        let refine = take("refine", Activation::Tanh)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(fail(&format!("unexpected tensor {extra}")));
        }
        let shapes_ok = cm.in_channels() == 4
            && cm.out_width() == 1
            && vectors.in_channels() == 3
            && vectors.out_width() == 3
            && adjust.in_channels() == 4
            && adjust.out_width() == 1
            && bcpn.in_channels() == 4
            && bcpn.out_width() == 3
            && refine.in_width() == RefineNet::IN_CHANNELS
            && refine.out_width() == 1;
        if !shapes_ok {
            return Err(fail("network input/output widths do not match their roles"));
        }
        Ok(ModelWeights {
            version,
            cm: CorrectionNet { net: cm },
            bspn: BimanualSaliencyNet { vectors, adjust },
            bcpn: ContactNet { net: bcpn },
            refine: RefineNet { mlp: refine },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelWeights::from_bytes(&std::fs::read(path)?)
    }

    /// This model with every parameter rounded to `f32`, i.e. exactly what a
    /// save/load round trip produces.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for group in [ParamGroup::Correction, ParamGroup::Joint, ParamGroup::Refine] {
            for t in out.group_params_mut(group) {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        out
    }
}

/// `N x (3 + extras)` constant input rows `[x, y, z, extra...]`.
pub fn point_features(cloud: &PointCloud, extras: &[&[f64]]) -> Result<Tensor> {
    let n = cloud.len();
    for e in extras {
        check_len("per-point input channel", n, e.len())?;
    }
    let width = 3 + extras.len();
    let mut data = Vec::with_capacity(n * width);
    for (i, p) in cloud.points().iter().enumerate() {
        data.extend_from_slice(p);
        data.extend(extras.iter().map(|e| e[i]));
    }
    Tensor::matrix(n, width, data)
}

/// `[xyz | column]` where the column is a graph value (so gradients reach it).
fn xyz_with(g: &mut Graph, cloud: &PointCloud, column: Var) -> Result<Var> {
    let n = cloud.len();
    let xyz = g.constant(point_features(cloud, &[])?);
    let col = g.reshape(column, &[n, 1])?;
    g.concat_features(xyz, col)
}

/// Graph-level forward passes, shared by training and inference.
pub mod graph {
    use super::*;

    /// Corrected map `clamp(S_o + S_c, 0, 1)` as an `[N]` vector.
    pub fn correction(g: &mut Graph, net: &EncoderDecoderVars, cloud: &PointCloud, s_o: &[f64]) -> Result<Var> {
        check_len("single-handed saliency", cloud.len(), s_o.len())?;
        let input = g.constant(point_features(cloud, &[s_o])?);
        let out = net.forward(g, input)?;
        let sc = g.column(out, 0)?;
        let so = g.constant(Tensor::vector(s_o.to_vec()));
        let sum = g.add(so, sc)?;
        g.clamp_inward(sum, 0.0, 1.0)
    }

    pub struct BspnOutputs {
        /// `N x 3` displacement field (absent on the inference path).
        pub vectors: Option<Var>,
        /// `[N]` saliency adjustment.
        pub delta: Var,
        /// `[N]` bimanual saliency `clamp(S + dS, 0, 1)`.
        pub b: Var,
    }

    /// Bimanual saliency from the current single-handed map `s` (a graph
    /// value; pass a constant to keep it out of the gradient).
    pub fn bspn(
        g: &mut Graph,
        vectors: Option<&EncoderDecoderVars>,
        adjust: &EncoderDecoderVars,
        cloud: &PointCloud,
        s: Var,
    ) -> Result<BspnOutputs> {
        if g.value(s).shape() != [cloud.len()] {
            return Err(Error::LengthMismatch {
                what: "saliency",
                expected: cloud.len(),
                got: g.value(s).len(),
            });
        }
        let v = match vectors {
            Some(net) => {
                let input = g.constant(point_features(cloud, &[])?);
                Some(net.forward(g, input)?)
            }
            None => None,
        };
        let input = xyz_with(g, cloud, s)?;
        let out = adjust.forward(g, input)?;
        let delta = g.column(out, 0)?;
        let sum = g.add(s, delta)?;
        let b = g.clamp_inward(sum, 0.0, 1.0)?;
        Ok(BspnOutputs { vectors: v, delta, b })
    }

    /// `N x 3` class logits from `[xyz, b]`.
    pub fn bcpn(g: &mut Graph, net: &EncoderDecoderVars, cloud: &PointCloud, b: Var) -> Result<Var> {
        let input = xyz_with(g, cloud, b)?;
        net.forward(g, input)
    }

    /// Refined map `clamp(B + R, 0, 1)` and the raw adjustment `R`.
    pub fn refine(g: &mut Graph, net: &MlpVars, cloud: &PointCloud, b: &[f64], labels: &ContactLabels) -> Result<(Var, Var)> {
        check_len("saliency", cloud.len(), b.len())?;
        check_len("labels", cloud.len(), labels.len())?;
        let onehot = |k: Label| -> Vec<f64> { labels.as_slice().iter().map(|&l| (l == k) as u8 as f64).collect() };
        let (c0, c1, c2) = (onehot(Label::None), onehot(Label::Right), onehot(Label::Left));
        let input = g.constant(point_features(cloud, &[b, &c0, &c1, &c2])?);
        let out = net.forward(g, input)?;
        let r = g.column(out, 0)?;
        let bv = g.constant(Tensor::vector(b.to_vec()));
        let sum = g.add(bv, r)?;
        Ok((g.clamp_inward(sum, 0.0, 1.0)?, r))
    }
}

/// Corrected single-handed map.
pub fn cm_forward(weights: &ModelWeights, cloud: &PointCloud, s_o: &SaliencyMap) -> Result<SaliencyMap> {
    let mut g = Graph::new();
    let net = weights.cm.net.bind(&mut g, false);
    let s = graph::correction(&mut g, &net, cloud, s_o.values())?;
    SaliencyMap::clamped(g.value(s).data().to_vec())
}

pub struct BspnPrediction {
    pub vectors: Tensor,
    pub delta: Tensor,
    pub b: SaliencyMap,
}

/// Full two-branch pass: displacement field, adjustment, and bimanual map.
pub fn bspn_forward(weights: &ModelWeights, cloud: &PointCloud, s: &SaliencyMap) -> Result<BspnPrediction> {
    check_len("saliency", cloud.len(), s.len())?;
    let mut g = Graph::new();
    let vnet = weights.bspn.vectors.bind(&mut g, false);
    let anet = weights.bspn.adjust.bind(&mut g, false);
    let sv = g.constant(Tensor::vector(s.values().to_vec()));
    let out = graph::bspn(&mut g, Some(&vnet), &anet, cloud, sv)?;
    Ok(BspnPrediction {
        vectors: g.value(out.vectors.expect("requested")).clone(),
        delta: g.value(out.delta).clone(),
        b: SaliencyMap::clamped(g.value(out.b).data().to_vec())?,
    })
}

/// Inference path of the saliency net: only the adjustment branch.
pub fn bspn_adjust(weights: &ModelWeights, cloud: &PointCloud, s: &SaliencyMap) -> Result<SaliencyMap> {
    check_len("saliency", cloud.len(), s.len())?;
    let mut g = Graph::new();
    let anet = weights.bspn.adjust.bind(&mut g, false);
    let sv = g.constant(Tensor::vector(s.values().to_vec()));
    let out = graph::bspn(&mut g, None, &anet, cloud, sv)?;
    SaliencyMap::clamped(g.value(out.b).data().to_vec())
}

/// `N x 3` contact-class logits.
pub fn bcpn_forward(weights: &ModelWeights, cloud: &PointCloud, b: &SaliencyMap) -> Result<Tensor> {
    check_len("saliency", cloud.len(), b.len())?;
    let mut g = Graph::new();
    let net = weights.bcpn.net.bind(&mut g, false);
    let bv = g.constant(Tensor::vector(b.values().to_vec()));
    let logits = graph::bcpn(&mut g, &net, cloud, bv)?;
    Ok(g.value(logits).clone())
}

/// Row-wise softmax of an `N x c` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Refined map `clamp(B + R, 0, 1)`.
pub fn refine_forward(net: &RefineNet, cloud: &PointCloud, b: &SaliencyMap, labels: &ContactLabels) -> Result<SaliencyMap> {
    let mut g = Graph::new();
    let vars = net.mlp.bind(&mut g, false);
    let (br, _) = graph::refine(&mut g, &vars, cloud, b.values(), labels)?;
    SaliencyMap::clamped(g.value(br).data().to_vec())
}
