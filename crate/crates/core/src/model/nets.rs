//! Network definitions: declarative layer lists plus the model that wires the
//! backbone, latent encoder, decoders and recognition heads together.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, DEFAULT_MULTIPLEX_SCALE, POSE_DIM};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::mesh::{icosphere, Laplacian, Mesh, SymmetryMap, TEMPLATE_SCALE};
use crate::tensor::Tensor;
use crate::warp::{self, PeMode};

use super::ops::{self, Activation};
use super::params::{Binding, ParamStore};
use super::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 convolution with padding 1.
    Conv {
        cin: usize,
        cout: usize,
        stride: usize,
        act: Activation,
        gain: f64,
    },
    Linear {
        nin: usize,
        nout: usize,
        act: Activation,
        gain: f64,
        /// Constant multiplier applied to the layer output before `act`.
        out_scale: f64,
    },
    Upsample {
        factor: usize,
    },
    Flatten,
    GlobalAvgPool,
}

/// An immutable chain of layers with a fixed input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Validates that shapes chain and returns the output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::Config(format!("{} layer {i}: {why}", self.name));
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Conv { cin, cout, stride, .. }, &[h, w, c]) => {
                    if c != *cin {
                        return Err(bad(format!("expects {cin} channels, got {c}")));
                    }
                    let (ho, wo) = ConvGeom::same3(*stride).out_size(h, w);
                    vec![ho, wo, *cout]
                }
                (LayerSpec::Linear { nin, nout, .. }, s) => {
                    let n: usize = s.iter().product();
                    if n != *nin {
                        return Err(bad(format!("expects {nin} inputs, got {n}")));
                    }
                    vec![*nout]
                }
                (LayerSpec::Upsample { factor }, &[h, w, c]) => vec![h * factor, w * factor, c],
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::GlobalAvgPool, &[_, _, c]) => vec![c],
                (_, s) => return Err(bad(format!("incompatible input shape {s:?}"))),
            };
        }
        Ok(shape)
    }

    fn param_names(&self, i: usize) -> (String, String) {
        (format!("{}.{i}.w", self.name), format!("{}.{i}.b", self.name))
    }

    /// He-uniform weights (scaled by each layer's gain) and zero biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.output_shape()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let (wshape, nout, fan_in, gain) = match *layer {
                LayerSpec::Conv { cin, cout, gain, .. } => (vec![cout, 3, 3, cin], cout, 9 * cin, gain),
                LayerSpec::Linear { nin, nout, gain, .. } => (vec![nout, nin], nout, nin, gain),
                _ => continue,
            };
            let bound = gain * (6.0 / fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let w = if bound > 0.0 {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            let (wn, bn) = self.param_names(i);
            store.insert(wn, Tensor::new(&wshape, w)?)?;
            store.insert(bn, Tensor::zeros(&[nout]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv { stride, act, .. } => {
                    let (wn, bn) = self.param_names(i);
                    let y = ops::conv2d(tape, x, params.var(&wn)?, params.var(&bn)?, ConvGeom::same3(stride))?;
                    ops::activation(tape, y, act)
                }
                LayerSpec::Linear { act, out_scale, .. } => {
                    let (wn, bn) = self.param_names(i);
                    let n = tape.value(x).len();
                    let flat = ops::reshape(tape, x, &[n])?;
                    let mut y = ops::linear(tape, flat, params.var(&wn)?, params.var(&bn)?)?;
                    if out_scale != 1.0 {
                        y = ops::scale(tape, y, out_scale);
                    }
                    ops::activation(tape, y, act)
                }
                LayerSpec::Upsample { factor } => ops::upsample_nearest(tape, x, factor)?,
                LayerSpec::Flatten => {
                    let n = tape.value(x).len();
                    ops::reshape(tape, x, &[n])?
                }
                LayerSpec::GlobalAvgPool => ops::global_avg_pool(tape, x)?,
            };
        }
        Ok(x)
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input image side.
    pub image_size: usize,
    /// Output channels of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    /// Channels of the convolution that precedes the latent FC layers.
    pub latent_conv_channels: usize,
    pub latent_dim: usize,
    /// Hidden channels of the flow decoder blocks; one more block maps to 2.
    pub flow_channels: Vec<usize>,
    pub appearance_channels: usize,
    pub shape_encoder_widths: Vec<usize>,
    pub fuse_hidden: usize,
    pub num_classes: usize,
    pub mesh_level: u32,
    pub pe: PeMode,
    pub use_shape_encoder: bool,
    pub shape_output_scale: f64,
    /// Initial flow maps the canonical chart onto this fraction of the image.
    pub flow_prior: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            backbone_channels: vec![16, 32, 64, 128],
            latent_conv_channels: 32,
            latent_dim: 200,
            flow_channels: vec![64, 32, 16, 8],
            appearance_channels: 128,
            shape_encoder_widths: vec![512, 512, 512],
            fuse_hidden: 256,
            num_classes: 4,
            mesh_level: 3,
            pe: PeMode::Pe4,
            use_shape_encoder: true,
            shape_output_scale: 0.1,
            flow_prior: 0.5,
            leaky_slope: 0.1,
        }
    }
}

impl ModelConfig {
    /// Feature map side after the backbone.
    pub fn feature_size(&self) -> usize {
        self.backbone_channels
            .iter()
            .fold(self.image_size, |s, _| ConvGeom::same3(2).out_size(s, s).0)
    }

    /// `(H^w, W^w)` of the canonical chart.
    pub fn canonical_size(&self) -> (usize, usize) {
        let k = 1usize << (self.flow_channels.len() + 1);
        (k, 2 * k)
    }

    /// Average-pool factor from the canonical flow to the feature warp grid.
    pub fn feature_flow_factor(&self) -> usize {
        (self.canonical_size().0 / self.feature_size()).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.backbone_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return Err(Error::Config(format!("latent_dim {} must be even and positive", self.latent_dim)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.use_shape_encoder && self.shape_encoder_widths.is_empty() {
            return Err(Error::Config("shape encoder needs at least one layer".into()));
        }
        let (ch, _) = self.canonical_size();
        let f = self.feature_size();
        if ch < f || ch % f != 0 {
            return Err(Error::Config(format!(
                "canonical height {ch} must be a multiple of the feature size {f}"
            )));
        }
        if !(0.0..1.0).contains(&self.flow_prior) {
            return Err(Error::Config("flow_prior must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// A tiny configuration for gradient checks and smoke tests.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            backbone_channels: vec![3, 4],
            latent_conv_channels: 2,
            latent_dim: 6,
            flow_channels: vec![3, 2],
            appearance_channels: 3,
            shape_encoder_widths: vec![5, 4, 4],
            fuse_hidden: 5,
            num_classes: 3,
            mesh_level: 1,
            ..Self::default()
        }
    }
}

/// All subnetworks.
#[derive(Clone, Debug, PartialEq)]
pub struct Specs {
    pub backbone: NetworkSpec,
    pub latent: NetworkSpec,
    pub shape: NetworkSpec,
    pub camera: NetworkSpec,
    pub flow: NetworkSpec,
    pub appearance: NetworkSpec,
    pub shape_encoder: Option<NetworkSpec>,
    pub fuse: NetworkSpec,
    pub classifier: NetworkSpec,
}

/// Template geometry shared by every instance.
#[derive(Clone, Debug)]
pub struct Template {
    pub mesh: Mesh,
    pub faces: Arc<Vec<[usize; 3]>>,
    pub symmetry: Arc<SymmetryMap>,
    pub laplacian: Arc<Laplacian>,
    /// Fixed chart coordinates `[V, 2]`.
    pub uv: Tensor,
}

impl Template {
    pub fn new(level: u32) -> Result<Self> {
        let mesh = icosphere(level)?;
        Ok(Self {
            faces: Arc::new(mesh.faces.clone()),
            symmetry: Arc::new(SymmetryMap::build(&mesh)?),
            laplacian: Arc::new(Laplacian::build(&mesh)?),
            uv: warp::template_uv(&mesh),
            mesh,
        })
    }

    pub fn num_free(&self) -> usize {
        self.symmetry.num_free()
    }
}

pub const TEMPLATE_PARAM: &str = "template";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub specs: Specs,
    pub template: Template,
    flow_bias: Tensor,
    feature_pe: Tensor,
}

/// Intermediate values of an instance forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub features: Var,
    pub latent: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ShapeVars {
    /// Mirror-symmetric deformation `[V, 3]`.
    pub deform: Var,
    /// Composed vertices `[V, 3]`.
    pub vertices: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Recognition {
    pub logits: Var,
    /// Penultimate embedding of the fusion head.
    pub embedding: Var,
    pub appearance: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let template = Template::new(config.mesh_level)?;
        let leaky = Activation::LeakyRelu(config.leaky_slope);
        let conv = |cin, cout, stride, act| LayerSpec::Conv {
            cin,
            cout,
            stride,
            act,
            gain: 1.0,
        };
        let fc = |nin, nout, act| LayerSpec::Linear {
            nin,
            nout,
            act,
            gain: 1.0,
            out_scale: 1.0,
        };

        let mut layers = Vec::new();
        let mut c = 3;
        for &co in &config.backbone_channels {
            layers.push(conv(c, co, 2, leaky));
            c = co;
        }
        let s = config.image_size;
        let backbone = NetworkSpec {
            name: "backbone".into(),
            input: vec![s, s, 3],
            layers,
        };
        let fshape = backbone.output_shape()?;
        let (fh, fw, fc_ch) = (fshape[0], fshape[1], fshape[2]);

        let z = config.latent_dim;
        let latent = NetworkSpec {
            name: "latent".into(),
            input: fshape.clone(),
            layers: vec![
                conv(fc_ch, config.latent_conv_channels, 1, leaky),
                LayerSpec::Flatten,
                fc(fh * fw * config.latent_conv_channels, z, leaky),
                fc(z, z, leaky),
            ],
        };
        let shape = NetworkSpec {
            name: "shape".into(),
            input: vec![z],
            layers: vec![LayerSpec::Linear {
                nin: z,
                nout: template.num_free() * 3,
                act: Activation::Identity,
                gain: 1.0,
                out_scale: config.shape_output_scale,
            }],
        };
        let camera = NetworkSpec {
            name: "camera".into(),
            input: vec![z],
            layers: vec![LayerSpec::Linear {
                nin: z,
                nout: POSE_DIM,
                act: Activation::Identity,
                gain: 0.0,
                out_scale: 1.0,
            }],
        };
        let mut layers = Vec::new();
        let mut c = z / 2;
        let n_blocks = config.flow_channels.len() + 1;
        for (i, &co) in config.flow_channels.iter().chain([2usize].iter()).enumerate() {
            layers.push(LayerSpec::Upsample { factor: 2 });
            let last = i + 1 == n_blocks;
            layers.push(LayerSpec::Conv {
                cin: c,
                cout: co,
                stride: 1,
                act: if last { Activation::Identity } else { leaky },
                gain: if last { 0.1 } else { 1.0 },
            });
            c = co;
        }
        let flow = NetworkSpec {
            name: "flow".into(),
            input: vec![1, 2, z / 2],
            layers,
        };
        let k = config.feature_flow_factor();
        let (ch, cw) = config.canonical_size();
        let (wh, ww) = (ch / k, cw / k);
        let appearance = NetworkSpec {
            name: "appearance".into(),
            input: vec![wh, ww, fc_ch + config.pe.channels()],
            layers: vec![
                conv(fc_ch + config.pe.channels(), config.appearance_channels, 1, leaky),
                conv(config.appearance_channels, config.appearance_channels, 1, leaky),
                LayerSpec::GlobalAvgPool,
            ],
        };
        let nv = template.mesh.num_vertices() * 3;
        let shape_encoder = config.use_shape_encoder.then(|| {
            let mut layers = Vec::new();
            let mut n = nv;
            let widths = &config.shape_encoder_widths;
            for (i, &wd) in widths.iter().enumerate() {
                let act = if i + 1 == widths.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                layers.push(fc(n, wd, act));
                n = wd;
            }
            NetworkSpec {
                name: "shape_encoder".into(),
                input: vec![nv],
                layers,
            }
        });
        let ys = config.shape_encoder_widths.last().copied().unwrap_or(0);
        let fuse = NetworkSpec {
            name: "fuse".into(),
            input: vec![config.appearance_channels + ys],
            layers: vec![fc(config.appearance_channels + ys, config.fuse_hidden, Activation::Relu)],
        };
        let classifier = NetworkSpec {
            name: "classifier".into(),
            input: vec![config.fuse_hidden],
            layers: vec![fc(config.fuse_hidden, config.num_classes, Activation::Identity)],
        };
        let specs = Specs {
            backbone,
            latent,
            shape,
            camera,
            flow,
            appearance,
            shape_encoder,
            fuse,
            classifier,
        };
        for spec in specs.all() {
            spec.output_shape()?;
        }
        let flow_bias = warp::identity_grid(ch, cw).scale(config.flow_prior);
        let flow_bias = Tensor::new(flow_bias.shape(), flow_bias.data().iter().map(|v| v.atanh()).collect())?;
        let feature_pe = warp::positional_encoding(wh, ww, config.pe)?;
        Ok(Self {
            config,
            specs,
            template,
            flow_bias,
            feature_pe,
        })
    }

    /// Fresh parameters: initialized networks, the template shape (free rows
    /// of the scaled icosphere) and an identity-biased camera decoder.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in self.specs.all() {
            spec.init_params(&mut store, &mut rng)?;
        }
        let base = self.template.mesh.vertex_tensor().scale(TEMPLATE_SCALE);
        store.insert(TEMPLATE_PARAM, self.template.symmetry.restrict(&base)?)?;
        let id = CameraPose::new(DEFAULT_MULTIPLEX_SCALE, [0.0, 0.0], [1.0, 0.0, 0.0, 0.0])?;
        store.set("camera.0.b", Tensor::from_vec(id.to_params().to_vec()))?;
        Ok(store)
    }

    pub fn is_camera_param(name: &str) -> bool {
        name.starts_with("camera.")
    }

    pub fn encode(&self, tape: &mut Tape, params: &Binding, image: Var) -> Result<Encoded> {
        let features = self.specs.backbone.forward(tape, params, image)?;
        let latent = self.specs.latent.forward(tape, params, features)?;
        Ok(Encoded { features, latent })
    }

    pub fn decode_shape(&self, tape: &mut Tape, params: &Binding, latent: Var) -> Result<ShapeVars> {
        let out = self.specs.shape.forward(tape, params, latent)?;
        let free = ops::reshape(tape, out, &[self.template.num_free(), 3])?;
        let sym = &self.template.symmetry;
        let deform = ops::expand_symmetric(tape, free, sym)?;
        let mean = ops::expand_symmetric(tape, params.var(TEMPLATE_PARAM)?, sym)?;
        let vertices = ops::add(tape, mean, deform)?;
        Ok(ShapeVars { deform, vertices })
    }

    /// Raw `[7]` pose parameters `[log s, tx, ty, qw, qx, qy, qz]`.
    pub fn decode_camera(&self, tape: &mut Tape, params: &Binding, latent: Var) -> Result<Var> {
        self.specs.camera.forward(tape, params, latent)
    }

    /// Appearance flow `[H^w, W^w, 2]` in `[-1, 1]`.
    pub fn decode_flow(&self, tape: &mut Tape, params: &Binding, latent: Var) -> Result<Var> {
        let z = self.config.latent_dim;
        let seed = ops::reshape(tape, latent, &[1, 2, z / 2])?;
        let raw = self.specs.flow.forward(tape, params, seed)?;
        let bias = tape.constant(self.flow_bias.clone());
        let pre = ops::add(tape, raw, bias)?;
        Ok(ops::activation(tape, pre, Activation::Tanh))
    }

    /// Canonical texture and per-face colors sampled from the input image.
    pub fn texture(&self, tape: &mut Tape, image: Var, flow: Var) -> Result<(Var, Var)> {
        let tex = ops::bilinear_sample(tape, image, flow)?;
        let vc = ops::sample_vertex_colors(tape, tex, &self.template.uv)?;
        let fc = ops::face_average(tape, vc, &self.template.faces)?;
        Ok((tex, fc))
    }

    /// Recognition logits from canonical appearance (warped features plus
    /// positional encoding) and, when enabled, the shape encoding of `deform`.
    pub fn recognize(&self, tape: &mut Tape, params: &Binding, features: Var, flow: Var, deform: Var) -> Result<Recognition> {
        let k = self.config.feature_flow_factor();
        let coarse = if k > 1 { ops::avg_pool(tape, flow, k)? } else { flow };
        let warped = ops::bilinear_sample(tape, features, coarse)?;
        let input = if self.config.pe == PeMode::None {
            warped
        } else {
            let pe = tape.constant(self.feature_pe.clone());
            ops::concat_channels(tape, warped, pe)?
        };
        let appearance = self.specs.appearance.forward(tape, params, input)?;
        let shape_feat = match &self.specs.shape_encoder {
            Some(spec) => {
                let n = tape.value(deform).len();
                let flat = ops::reshape(tape, deform, &[n])?;
                spec.forward(tape, params, flat)?
            }
            None => tape.constant(Tensor::zeros(&[self.config.shape_encoder_widths.last().copied().unwrap_or(0)])),
        };
        let fused = ops::concat(tape, &[appearance, shape_feat]);
        let embedding = self.specs.fuse.forward(tape, params, fused)?;
        let logits = self.specs.classifier.forward(tape, params, embedding)?;
        Ok(Recognition {
            logits,
            embedding,
            appearance,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.config.image_size, self.config.image_size, 3]
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        image.expect_shape("model input", &self.image_shape())
    }
}

impl Specs {
    pub fn all(&self) -> Vec<&NetworkSpec> {
        let mut v = vec![&self.backbone, &self.latent, &self.shape, &self.camera, &self.flow, &self.appearance];
        if let Some(s) = &self.shape_encoder {
            v.push(s);
        }
        v.push(&self.fuse);
        v.push(&self.classifier);
        v
    }
}
