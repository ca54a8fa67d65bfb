//! Line-based architecture files.
//!
//! ```text
//! file      := { line '\n' }
//! line      := blank | '#' comment | directive
//! directive := 'input' ( 'dim=' N | 'image=' N 'x' N 'x' N )
//!            | 'batch' N
//!            | 'layer' affine { '|' activation }
//!            | 'objective' ( 'squared' | 'logistic' | 'clustering' )
//!            | 'regularizer' ( 'zero' | 'ridge' 'rho=' F )
//!            | 'radius' F | 'radii' F { F }
//!            | 'input-norm' F
//! affine    := 'identity' | 'fc' 'outputs=' N | 'conv' 'filters=' N 'kernel=' K [ 'stride=' N ] [ 'pad=' N ] [ 'in=' S ]
//!              [ 'residual' ]
//! activation:= 'identity' | 'relu' | 'softplus' | 'sigmoid' | 'softmax'
//!            | ( 'avgpool' | 'maxpool' ) 'kernel=' K [ 'stride=' N ] [ 'in=' S ]
//!            | 'batchnorm' 'eps=' F
//! K         := N | N 'x' N          (height x width)
//! S         := N 'x' N 'x' N        (channels x height x width)
//! ```
//!
//! `input` must precede every `layer`. The per-sample shape is tracked through
//! the file: convolutions and pooling read it from the previous stage, or from
//! `in=` when the state is flat. Defaults: `batch 128`, `radius 1`,
//! `input-norm 1`, `objective squared`, `regularizer zero`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chain::{Activation, Affine, ChainSpec, ConvGeometry, Layer, PoolGeometry};
use crate::error::{Error, Result};
use crate::objectives::{ConvexClustering, LogisticLoss, Objective, Regularizer, SquaredLoss};
use crate::smoothness::BoundedDomain;
use crate::tensor::Vector;

/// Per-sample layout of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn dim(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveKind {
    #[default]
    Squared,
    Logistic,
    Clustering,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Squared => "squared",
            ObjectiveKind::Logistic => "logistic",
            ObjectiveKind::Clustering => "clustering",
        }
    }

    /// Instance on seeded synthetic labels for `n` samples of output size `q`.
    pub fn synthetic(&self, n: usize, q: usize, seed: u64) -> Result<Box<dyn Objective>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self {
            ObjectiveKind::Squared => {
                let y = Vector::from_fn(n * q, |_, _| StandardNormal.sample(&mut rng));
                Box::new(SquaredLoss::new(y, n)?)
            }
            ObjectiveKind::Logistic => {
                let classes: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % q.max(1)).collect();
                Box::new(LogisticLoss::from_classes(&classes, q)?)
            }
            ObjectiveKind::Clustering => Box::new(ConvexClustering::new(n, q)),
        })
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "squared" => Ok(ObjectiveKind::Squared),
            "logistic" => Ok(ObjectiveKind::Logistic),
            "clustering" => Ok(ObjectiveKind::Clustering),
            other => Err(format!("unknown objective '{other}'")),
        }
    }
}

/// A parsed architecture file.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchFile {
    pub spec: ChainSpec,
    pub input: Shape,
    pub domain: BoundedDomain,
    pub objective: ObjectiveKind,
    pub regularizer: Regularizer,
}

impl ArchFile {
    /// Seeded synthetic input with ‖x₀‖ equal to the domain's input norm.
    pub fn synthetic_input(&self, seed: u64) -> Vector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Vector::from_fn(self.spec.batch * self.spec.input_dim, |_, _| StandardNormal.sample(&mut rng));
        let n = x.norm();
        if n == 0.0 {
            x
        } else {
            x * (self.domain.input_norm / n)
        }
    }

    /// Copy with a different batch size.
    pub fn with_batch(&self, m: usize) -> Result<Self> {
        Ok(Self { spec: self.spec.with_batch(m)?, ..self.clone() })
    }

    /// Copy with every batch-norm ε replaced.
    pub fn with_batchnorm_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("batch-norm eps must be positive, got {eps}")));
        }
        let mut out = self.clone();
        for l in &mut out.spec.layers {
            for a in &mut l.activations {
                if let Activation::BatchNorm { eps: e } = a {
                    *e = eps;
                }
            }
        }
        Ok(out)
    }
}

pub fn parse_file(path: impl AsRef<Path>) -> Result<ArchFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

struct Line {
    no: usize,
}

impl Line {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse { line: self.no, msg: msg.into() })
    }
}

fn num<T: FromStr>(ln: &Line, key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| ln.err(format!("bad value '{v}' for {key}")))
}

fn pos_f64(ln: &Line, key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(ln, key, v)?;
    if !(x > 0.0) || !x.is_finite() {
        return ln.err(format!("{key} must be positive and finite"));
    }
    Ok(x)
}

fn dims_of(ln: &Line, key: &str, v: &str, n: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() != n && !(n == 2 && parts.len() == 1) {
        return ln.err(format!("{key} expects {n} sizes separated by 'x'"));
    }
    let mut out = parts.iter().map(|p| num::<usize>(ln, key, p)).collect::<Result<Vec<_>>>()?;
    if out.contains(&0) {
        return ln.err(format!("{key} sizes must be positive"));
    }
    if out.len() == 1 {
        out.push(out[0]);
    }
    Ok(out)
}

/// key=value pairs and bare flags of one record.
struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    flags: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(tokens: &[&'a str]) -> Self {
        let mut pairs = Vec::new();
        let mut flags = Vec::new();
        for t in tokens {
            match t.split_once('=') {
                Some((k, v)) => pairs.push((k, v)),
                None => flags.push(*t),
            }
        }
        Self { pairs, flags }
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        let i = self.pairs.iter().position(|(k, _)| *k == key)?;
        Some(self.pairs.remove(i).1)
    }

    fn take_flag(&mut self, flag: &str) -> bool {
        match self.flags.iter().position(|f| *f == flag) {
            Some(i) => {
                self.flags.remove(i);
                true
            }
            None => false,
        }
    }

    fn require(&mut self, ln: &Line, what: &str, key: &str) -> Result<&'a str> {
        match self.take(key) {
            Some(v) => Ok(v),
            None => ln.err(format!("{what} needs {key}=")),
        }
    }

    fn finish(self, ln: &Line, what: &str) -> Result<()> {
        if let Some((k, _)) = self.pairs.first() {
            return ln.err(format!("unknown key '{k}' for {what}"));
        }
        if let Some(f) = self.flags.first() {
            return ln.err(format!("unknown flag '{f}' for {what}"));
        }
        Ok(())
    }
}

fn image_in(ln: &Line, what: &str, f: &mut Fields, cur: Shape) -> Result<(usize, usize, usize)> {
    match (f.take("in"), cur) {
        (Some(v), _) => {
            let d = dims_of(ln, "in", v, 3)?;
            if d[0] * d[1] * d[2] != cur.dim() {
                return ln.err(format!("in={v} has {} entries, the state has {}", d[0] * d[1] * d[2], cur.dim()));
            }
            Ok((d[0], d[1], d[2]))
        }
        (None, Shape::Image { channels, height, width }) => Ok((channels, height, width)),
        (None, Shape::Flat(_)) => ln.err(format!("{what} on a flat state needs in=CxHxW")),
    }
}

fn parse_affine(ln: &Line, tokens: &[&str], cur: Shape) -> Result<(Affine, bool, Shape)> {
    let (kind, rest) = tokens.split_first().map_or_else(|| ln.err("layer needs an affine kind"), Ok)?;
    let mut f = Fields::new(rest);
    let residual = f.take_flag("residual");
    let (affine, shape) = match *kind {
        "identity" => {
            let d = if residual { return ln.err("residual identity layer is not supported") } else { cur.dim() };
            (Affine::Identity { dim: d }, cur)
        }
        "fc" => {
            let outputs: usize = num(ln, "outputs", f.require(ln, "fc", "outputs")?)?;
            if outputs == 0 {
                return ln.err("outputs must be positive");
            }
            let inputs = if residual {
                match cur.dim().checked_sub(outputs) {
                    Some(i) if i > 0 => i,
                    _ => return ln.err(format!("residual fc with {outputs} outputs needs a state larger than {}", cur.dim())),
                }
            } else {
                cur.dim()
            };
            (Affine::FullyConnected { inputs, outputs }, Shape::Flat(outputs))
        }
        "conv" => {
            if residual {
                return ln.err("residual convolution is not supported");
            }
            let (channels, height, width) = image_in(ln, "conv", &mut f, cur)?;
            let filters: usize = num(ln, "filters", f.require(ln, "conv", "filters")?)?;
            let k = dims_of(ln, "kernel", f.require(ln, "conv", "kernel")?, 2)?;
            let stride: usize = f.take("stride").map_or(Ok(1), |v| num(ln, "stride", v))?;
            let pad: usize = f.take("pad").map_or(Ok(0), |v| num(ln, "pad", v))?;
            let g = ConvGeometry { channels, height, width, filters, kernel_h: k[0], kernel_w: k[1], stride, pad };
            if filters == 0 || stride == 0 || k[0] > height + 2 * pad || k[1] > width + 2 * pad {
                return ln.err("conv geometry does not fit the input");
            }
            (Affine::Conv(g), Shape::Image { channels: filters, height: g.out_h(), width: g.out_w() })
        }
        other => return ln.err(format!("unknown affine kind '{other}'")),
    };
    f.finish(ln, kind)?;
    Ok((affine, residual, shape))
}

fn parse_activation(ln: &Line, tokens: &[&str], cur: Shape) -> Result<(Activation, Shape)> {
    let (kind, rest) = tokens.split_first().map_or_else(|| ln.err("empty activation stage"), Ok)?;
    let mut f = Fields::new(rest);
    let out = match *kind {
        "identity" => (Activation::Identity, cur),
        "relu" => (Activation::Relu, cur),
        "softplus" => (Activation::Softplus, cur),
        "sigmoid" => (Activation::Sigmoid, cur),
        "softmax" => (Activation::Softmax, cur),
        "batchnorm" => (Activation::BatchNorm { eps: pos_f64(ln, "eps", f.require(ln, "batchnorm", "eps")?)? }, cur),
        "avgpool" | "maxpool" => {
            let (channels, height, width) = image_in(ln, kind, &mut f, cur)?;
            let k = dims_of(ln, "kernel", f.require(ln, kind, "kernel")?, 2)?;
            let stride: usize = f.take("stride").map_or(Ok(k[0]), |v| num(ln, "stride", v))?;
            let g = PoolGeometry { channels, height, width, kernel_h: k[0], kernel_w: k[1], stride };
            if let Err(e) = g.validate() {
                return ln.err(e.to_string());
            }
            let shape = Shape::Image { channels, height: g.out_h(), width: g.out_w() };
            let a = if *kind == "avgpool" { Activation::AvgPool(g) } else { Activation::MaxPool(g) };
            (a, shape)
        }
        other => return ln.err(format!("unknown activation '{other}'")),
    };
    f.finish(ln, kind)?;
    Ok(out)
}

pub fn parse(text: &str) -> Result<ArchFile> {
    let mut input: Option<Shape> = None;
    let mut cur = Shape::Flat(0);
    let mut batch = 128usize;
    let mut layers = Vec::new();
    let mut objective = ObjectiveKind::default();
    let mut regularizer = Regularizer::Zero;
    let mut radius: Option<f64> = None;
    let mut radii: Option<(usize, Vec<f64>)> = None;
    let mut input_norm = 1.0;
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let ln = Line { no: i + 1 };
        last_line = ln.no;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = body.split_whitespace().collect();
        let args = &tokens[1..];
        match tokens[0] {
            "input" => {
                if input.is_some() {
                    return ln.err("duplicate input directive");
                }
                let mut f = Fields::new(args);
                let shape = match (f.take("dim"), f.take("image")) {
                    (Some(d), None) => match num::<usize>(&ln, "dim", d)? {
                        0 => return ln.err("dim must be positive"),
                        d => Shape::Flat(d),
                    },
                    (None, Some(v)) => {
                        let d = dims_of(&ln, "image", v, 3)?;
                        Shape::Image { channels: d[0], height: d[1], width: d[2] }
                    }
                    _ => return ln.err("input needs exactly one of dim= or image="),
                };
                f.finish(&ln, "input")?;
                input = Some(shape);
                cur = shape;
            }
            "batch" => {
                batch = match args {
                    [v] => num(&ln, "batch", v)?,
                    _ => return ln.err("batch takes one value"),
                };
                if batch == 0 {
                    return ln.err("batch must be positive");
                }
            }
            "layer" => {
                if input.is_none() {
                    return ln.err("layer before input directive");
                }
                let rest = body["layer".len()..].trim();
                let mut stages = rest.split('|').map(|s| s.split_whitespace().collect::<Vec<_>>());
                let head = stages.next().unwrap_or_default();
                let state_dim = cur.dim();
                let (affine, residual, mut shape) = parse_affine(&ln, &head, cur)?;
                let mut acts = Vec::new();
                for st in stages {
                    let (a, s) = parse_activation(&ln, &st, shape)?;
                    acts.push(a);
                    shape = s;
                }
                let layer = Layer { affine, activations: acts, residual };
                if let Err(e) = layer.validate() {
                    return ln.err(format!("layer {}: {e}", layers.len() + 1));
                }
                if layer.input_dim() != state_dim {
                    return ln.err(format!("layer {} expects {} inputs, state has {state_dim}", layers.len() + 1, layer.input_dim()));
                }
                cur = if residual { Shape::Flat(layer.output_dim()?) } else { shape };
                layers.push(layer);
            }
            "objective" => {
                objective = match args {
                    [v] => v.parse().or_else(|e: String| ln.err(e))?,
                    _ => return ln.err("objective takes one name"),
                };
            }
            "regularizer" => {
                regularizer = match args {
                    ["zero"] => Regularizer::Zero,
                    ["ridge", kv] => match kv.split_once('=') {
                        Some(("rho", v)) => {
                            let r: f64 = num(&ln, "rho", v)?;
                            if !(r >= 0.0) || !r.is_finite() {
                                return ln.err("rho must be nonnegative and finite");
                            }
                            Regularizer::Ridge(r)
                        }
                        _ => return ln.err("ridge needs rho="),
                    },
                    _ => return ln.err("regularizer is 'zero' or 'ridge rho=F'"),
                };
            }
            "radius" => {
                radius = match args {
                    [v] => Some(pos_f64(&ln, "radius", v)?),
                    _ => return ln.err("radius takes one value"),
                };
            }
            "radii" => {
                if args.is_empty() {
                    return ln.err("radii needs at least one value");
                }
                radii = Some((ln.no, args.iter().map(|v| pos_f64(&ln, "radii", v)).collect::<Result<_>>()?));
            }
            "input-norm" => {
                input_norm = match args {
                    [v] => num(&ln, "input-norm", v)?,
                    _ => return ln.err("input-norm takes one value"),
                };
                if !(input_norm >= 0.0) || !f64::is_finite(input_norm) {
                    return ln.err("input-norm must be nonnegative and finite");
                }
            }
            other => return ln.err(format!("unknown directive '{other}'")),
        }
    }

    let Some(input) = input else {
        return Err(Error::Parse { line: last_line.max(1), msg: "missing input directive".into() });
    };
    if layers.is_empty() {
        return Err(Error::Parse { line: last_line.max(1), msg: "no layers".into() });
    }
    let tau = layers.len();
    let radii = match (radii, radius) {
        (Some(_), Some(_)) => return Err(Error::Parse { line: last_line, msg: "give either radius or radii".into() }),
        (Some((no, r)), None) => {
            if r.len() != tau {
                return Err(Error::Parse { line: no, msg: format!("{} radii for {tau} layers", r.len()) });
            }
            r
        }
        (None, r) => vec![r.unwrap_or(1.0); tau],
    };
    let spec = ChainSpec::new(input.dim(), batch, layers)?;
    let domain = BoundedDomain::new(radii, input_norm)?;
    Ok(ArchFile { spec, input, domain, objective, regularizer })
}

fn kernel_str(h: usize, w: usize) -> String {
    if h == w {
        h.to_string()
    } else {
        format!("{h}x{w}")
    }
}

/// Writes `arch` in the grammar accepted by [`parse`].
pub fn emit(arch: &ArchFile) -> Result<String> {
    let mut s = String::new();
    let mut cur = arch.input;
    match cur {
        Shape::Flat(d) => writeln!(s, "input dim={d}"),
        Shape::Image { channels, height, width } => writeln!(s, "input image={channels}x{height}x{width}"),
    }
    .expect("string write");
    writeln!(s, "batch {}", arch.spec.batch).expect("string write");
    let image_key = |cur: Shape, c: usize, h: usize, w: usize| match cur {
        Shape::Image { channels, height, width } if (channels, height, width) == (c, h, w) => String::new(),
        _ => format!(" in={c}x{h}x{w}"),
    };
    for (t, l) in arch.spec.layers.iter().enumerate() {
        let mut line = String::from("layer ");
        let mut shape = match &l.affine {
            Affine::Identity { .. } => {
                line.push_str("identity");
                cur
            }
            Affine::FullyConnected { outputs, .. } => {
                write!(line, "fc outputs={outputs}").expect("string write");
                Shape::Flat(*outputs)
            }
            Affine::Conv(g) => {
                write!(
                    line,
                    "conv filters={} kernel={} stride={} pad={}{}",
                    g.filters,
                    kernel_str(g.kernel_h, g.kernel_w),
                    g.stride,
                    g.pad,
                    image_key(cur, g.channels, g.height, g.width)
                )
                .expect("string write");
                Shape::Image { channels: g.filters, height: g.out_h(), width: g.out_w() }
            }
            Affine::Form(_) => return Err(Error::Invalid(format!("layer {}: dense forms have no file syntax", t + 1))),
        };
        if l.residual {
            line.push_str(" residual");
        }
        for a in &l.activations {
            line.push_str(" | ");
            match a {
                Activation::AvgPool(g) | Activation::MaxPool(g) => {
                    let name = if matches!(a, Activation::AvgPool(_)) { "avgpool" } else { "maxpool" };
                    write!(
                        line,
                        "{name} kernel={} stride={}{}",
                        kernel_str(g.kernel_h, g.kernel_w),
                        g.stride,
                        image_key(shape, g.channels, g.height, g.width)
                    )
                    .expect("string write");
                    shape = Shape::Image { channels: g.channels, height: g.out_h(), width: g.out_w() };
                }
                Activation::BatchNorm { eps } => write!(line, "batchnorm eps={eps}").expect("string write"),
                Activation::Implicit(_) => {
                    return Err(Error::Invalid(format!("layer {}: implicit layers have no file syntax", t + 1)))
                }
                other => line.push_str(other.name()),
            }
        }
        cur = if l.residual { Shape::Flat(l.output_dim()?) } else { shape };
        writeln!(s, "{line}").expect("string write");
    }
    writeln!(s, "objective {}", arch.objective.name()).expect("string write");
    match arch.regularizer {
        Regularizer::Zero => writeln!(s, "regularizer zero"),
        Regularizer::Ridge(r) => writeln!(s, "regularizer ridge rho={r}"),
    }
    .expect("string write");
    let r = &arch.domain.radii;
    if r.iter().all(|&x| x == r[0]) {
        writeln!(s, "radius {}", r[0])
    } else {
        writeln!(s, "radii {}", r.iter().map(f64::to_string).collect::<Vec<_>>().join(" "))
    }
    .expect("string write");
    writeln!(s, "input-norm {}", arch.domain.input_norm).expect("string write");
    Ok(s)
}
