//! Named parameter storage and the index layout the forward pass reads.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::net::config::{ArchConfig, ContextEncoding};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
    /// Uniform in `±1`, for lookup tables.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Affine {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    pub gn1: Norm,
    pub conv1: Affine,
    pub step: Affine,
    pub gn2: Norm,
    pub conv2: Affine,
    pub skip: Option<Affine>,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    pub fuse: Option<Affine>,
    pub res: ResBlock,
    pub down: Option<Affine>,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    pub up: Option<Affine>,
    pub res: ResBlock,
}

#[derive(Clone, Debug)]
pub(crate) struct GruCell {
    pub z: Affine,
    pub r: Affine,
    pub n: Affine,
    pub step_z: Affine,
    pub step_r: Affine,
    pub step_n: Affine,
}

#[derive(Clone, Debug)]
pub(crate) enum Embedder {
    Table { table: usize },
    Affine(Affine),
}

/// Parameter indices for every sub-network, derived from an [`ArchConfig`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub step: Affine,
    pub input: Affine,
    pub encoders: Vec<Encoder>,
    pub decoders: Vec<Decoder>,
    pub out_norm: Norm,
    pub out: Affine,
    pub gru_step: Option<Affine>,
    pub gru: Vec<GruCell>,
    pub embedders: Vec<Embedder>,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.w"), vec![cout, cin, k], Init::FanIn(cin * k)),
            b: self.add(format!("{name}.b"), vec![cout], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Affine {
        Affine {
            w: self.add(format!("{name}.w"), vec![out, inp], Init::FanIn(inp)),
            b: self.add(format!("{name}.b"), vec![out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.g"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.b"), vec![c], Init::Zeros),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, k: usize, s: usize) -> ResBlock {
        ResBlock {
            gn1: self.norm(&format!("{name}.gn1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cout, cin, k),
            step: self.linear(&format!("{name}.step"), cout, s),
            gn2: self.norm(&format!("{name}.gn2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, k),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cout, cin, 1)),
        }
    }
}

fn build_layout(cfg: &ArchConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let k = cfg.kernel_size;
    let s = cfg.step_embed_dim;
    let step = b.linear("step", s, s);
    let input = b.conv("input", cfg.channels(0), cfg.input_width(), k);
    let mut encoders = Vec::new();
    for i in 0..cfg.blocks {
        let c = cfg.channels(i);
        let fuse = cfg
            .state_propagation
            .then(|| b.conv(&format!("enc{i}.fuse"), c, 2 * c, 1));
        let res = b.res(&format!("enc{i}"), c, c, k, s);
        let down = (i + 1 < cfg.blocks).then(|| b.conv(&format!("down{i}"), cfg.channels(i + 1), c, k));
        encoders.push(Encoder { fuse, res, down });
    }
    let mut decoders = Vec::new();
    for i in 0..cfg.blocks {
        let c = cfg.channels(i);
        let deepest = i + 1 == cfg.blocks;
        let up = (!deepest).then(|| b.conv(&format!("up{i}"), c, cfg.channels(i + 1), k));
        let cin = if deepest { c } else { 2 * c };
        let res = b.res(&format!("dec{i}"), cin, c, k, s);
        decoders.push(Decoder { up, res });
    }
    let out_norm = b.norm("out.gn", cfg.channels(0));
    let out = Affine {
        w: b.add("out.w".into(), vec![2, cfg.channels(0), k], Init::Zeros),
        b: b.add("out.b".into(), vec![2], Init::Zeros),
    };
    let mut gru_step = None;
    let mut gru = Vec::new();
    if cfg.state_propagation {
        gru_step = Some(b.linear("gru.step", s, s));
        for i in 0..cfg.blocks {
            let c = cfg.channels(i);
            gru.push(GruCell {
                z: b.conv(&format!("gru{i}.z"), c, 2 * c, k),
                r: b.conv(&format!("gru{i}.r"), c, 2 * c, k),
                n: b.conv(&format!("gru{i}.n"), c, 2 * c, k),
                step_z: b.linear(&format!("gru{i}.step_z"), c, s),
                step_r: b.linear(&format!("gru{i}.step_r"), c, s),
                step_n: b.linear(&format!("gru{i}.step_n"), c, s),
            });
        }
    }
    let embedders = cfg
        .contexts
        .iter()
        .enumerate()
        .map(|(i, spec)| match spec.encoding {
            ContextEncoding::Categorical { vocab } => Embedder::Table {
                table: b.add(format!("ctx{i}.table"), vec![vocab, spec.dim], Init::Unit),
            },
            ContextEncoding::Scalar => Embedder::Affine(b.linear(&format!("ctx{i}"), spec.dim, 1)),
            ContextEncoding::Vector { width } => Embedder::Affine(b.linear(&format!("ctx{i}"), spec.dim, width)),
        })
        .collect();
    (
        Layout {
            step,
            input,
            encoders,
            decoders,
            out_norm,
            out,
            gru_step,
            gru,
            embedders,
        },
        b,
    )
}

/// All learnable tensors, addressable by name.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    config: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
    pub(crate) layout: Layout,
}

impl<F: Real> ModelParams<F> {
    /// Fan-in uniform weights, zero biases, unit norm gains and a zeroed
    /// output projection, so the fresh model predicts zero noise.
    pub fn init<R: Rng + ?Sized>(config: &ArchConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::from_fn(shape, |_| F::one()),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)))
                }
                Init::Unit => Tensor::from_fn(shape, |_| F::lit(rng.random_range(-1.0..1.0))),
            })
            .collect();
        Ok(Self::assemble(config.clone(), layout, b.names, tensors))
    }

    /// Every tensor zero.
    pub fn zeros(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(config);
        let tensors = b.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self::assemble(config.clone(), layout, b.names, tensors))
    }

    /// Rebuilds parameters from named tensors, e.g. read from a checkpoint.
    pub fn from_named(config: &ArchConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut seen = vec![false; p.tensors.len()];
        for (name, t) in named {
            let i = *p
                .index
                .get(&name)
                .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
            if t.shape() != p.tensors[i].shape() {
                return Err(invalid(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.tensors[i].shape()
                )));
            }
            p.tensors[i] = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("parameter {} missing", p.names[i])));
        }
        Ok(p)
    }

    fn assemble(config: ArchConfig, layout: Layout, names: Vec<String>, tensors: Vec<Tensor<F>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            tensors,
            index,
            layout,
        }
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
            layout: self.layout.clone(),
        }
    }
}
