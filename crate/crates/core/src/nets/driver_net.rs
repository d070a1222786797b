use std::fmt;
use std::str::FromStr;

use super::activation::{softplus_inverse, Activation};
use super::mlp::{Mlp, Tape, Transform, WeightRole};
use super::{Driver, DriverGradients};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

/// Structural family of a driver network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureKind {
    /// Unconstrained network of `(t, x, y, z)`.
    Free,
    /// `N1(t, x, z) + N2(y)`.
    Separable,
    /// `N1(t, x, z) + M2 tanh(N2(t, x, z)) N3(y)`.
    BoundedInteraction,
    /// Non-increasing in `y` through sign-constrained weights.
    MonotoneY,
    /// Convex in `(y, z)` for fixed `(t, x)`.
    IcnnYZ,
}

impl ArchitectureKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::Free => "free",
            ArchitectureKind::Separable => "separable",
            ArchitectureKind::BoundedInteraction => "bounded_interaction",
            ArchitectureKind::MonotoneY => "monotone_y",
            ArchitectureKind::IcnnYZ => "icnn_yz",
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "free" => ArchitectureKind::Free,
            "separable" => ArchitectureKind::Separable,
            "bounded_interaction" => ArchitectureKind::BoundedInteraction,
            "monotone_y" => ArchitectureKind::MonotoneY,
            "icnn_yz" => ArchitectureKind::IcnnYZ,
            _ => return Err(Error::Parse(format!("unknown architecture '{s}'"))),
        })
    }
}

/// Input dimensions and widths of a driver network.
///
/// `hidden` gives the widths of the main block. `aux_hidden` gives the widths
/// of the sub-networks of the separable (`N2`) and bounded-interaction
/// (`N2`, `N3`) kinds and must be absent for the others. `bound` is the `M2`
/// of the bounded-interaction kind. `monotone_aux` makes the separable `N2`
/// non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub x_dim: usize,
    pub z_dim: usize,
    pub hidden: Vec<usize>,
    pub aux_hidden: Option<Vec<usize>>,
    pub activation: Activation,
    pub bound: Option<f64>,
    pub monotone_aux: bool,
}

impl Layout {
    pub fn new(x_dim: usize, z_dim: usize, hidden: &[usize]) -> Self {
        Layout {
            x_dim,
            z_dim,
            hidden: hidden.to_vec(),
            aux_hidden: None,
            activation: Activation::Tanh,
            bound: None,
            monotone_aux: false,
        }
    }

    pub fn activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn aux(mut self, widths: &[usize]) -> Self {
        self.aux_hidden = Some(widths.to_vec());
        self
    }

    pub fn bound(mut self, m2: f64) -> Self {
        self.bound = Some(m2);
        self
    }

    pub fn monotone_aux(mut self, on: bool) -> Self {
        self.monotone_aux = on;
        self
    }

    fn t_index(&self) -> usize {
        0
    }

    fn x_indices(&self) -> std::ops::Range<usize> {
        1..1 + self.x_dim
    }

    fn y_index(&self) -> usize {
        1 + self.x_dim
    }

    fn z_indices(&self) -> std::ops::Range<usize> {
        2 + self.x_dim..2 + self.x_dim + self.z_dim
    }

    fn input_len(&self) -> usize {
        2 + self.x_dim + self.z_dim
    }

    fn all_inputs(&self) -> Vec<usize> {
        (0..self.input_len()).collect()
    }

    fn txz_inputs(&self) -> Vec<usize> {
        let mut v = vec![self.t_index()];
        v.extend(self.x_indices());
        v.extend(self.z_indices());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Blocks {
    main: Mlp,
    aux: Vec<Mlp>,
}

/// A small feed-forward driver `f(t, x, y, z)` whose raw parameters are
/// unconstrained reals; constraints live in the map from raw to effective
/// weights.
///
/// Parameters are stored block by block (main block, then sub-networks in
/// the order `N2`, `N3`). Within a block, layer by layer: a row-major weight
/// matrix `[out][in]` followed by the biases. Layer 0 reads the inputs in
/// the order `t, x.., y, z..` restricted to those the block sees; later
/// layers read the previous activations followed (ICNN only) by the same
/// inputs again.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverNet {
    kind: ArchitectureKind,
    layout: Layout,
    blocks: Blocks,
    transforms: Vec<Transform>,
    raw: Vec<f64>,
    eff: Vec<f64>,
}

fn validate(kind: ArchitectureKind, l: &Layout) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArchitecture(m));
    if l.z_dim == 0 {
        return bad("z dimension must be at least 1".into());
    }
    let widths_ok = |w: &[usize]| w.iter().all(|&n| n >= 1);
    if !widths_ok(&l.hidden) || !l.aux_hidden.as_deref().is_none_or(widths_ok) {
        return bad("layer widths must be positive".into());
    }
    let needs_aux = matches!(kind, ArchitectureKind::Separable | ArchitectureKind::BoundedInteraction);
    if needs_aux && l.aux_hidden.is_none() {
        return bad(format!("{kind} requires auxiliary sub-network widths"));
    }
    if !needs_aux && l.aux_hidden.is_some() {
        return bad(format!("{kind} has no auxiliary sub-network"));
    }
    match (kind, l.bound) {
        (ArchitectureKind::BoundedInteraction, Some(m)) if m.is_finite() && m > 0.0 => {}
        (ArchitectureKind::BoundedInteraction, _) => {
            return bad("bounded_interaction requires a finite positive bound".into())
        }
        (_, Some(_)) => return bad(format!("{kind} takes no bound")),
        _ => {}
    }
    if l.monotone_aux && kind != ArchitectureKind::Separable {
        return bad("monotone_aux applies only to the separable kind".into());
    }
    match kind {
        ArchitectureKind::MonotoneY => {
            if l.hidden.is_empty() {
                return bad("monotone_y needs at least one hidden layer".into());
            }
            if !l.activation.is_smooth_monotone() {
                return bad(format!(
                    "monotone_y needs a smooth non-decreasing activation, got {}",
                    l.activation
                ));
            }
        }
        ArchitectureKind::IcnnYZ => {
            if l.hidden.is_empty() {
                return bad("icnn_yz needs at least one hidden layer".into());
            }
            if !l.activation.is_convex_monotone() {
                return bad(format!(
                    "icnn_yz needs a convex non-decreasing activation, got {}",
                    l.activation
                ));
            }
        }
        ArchitectureKind::Separable if l.monotone_aux => {
            if l.aux_hidden.as_ref().is_some_and(|a| a.is_empty()) {
                return bad("a monotone N2 needs at least one hidden layer".into());
            }
            if !l.activation.is_smooth_monotone() {
                return bad(format!(
                    "a monotone N2 needs a smooth non-decreasing activation, got {}",
                    l.activation
                ));
            }
        }
        _ => {}
    }
    Ok(())
}

fn assemble(kind: ArchitectureKind, l: &Layout) -> (Blocks, Vec<Transform>) {
    let act = l.activation;
    let mlp = |inputs: Vec<usize>, widths: &[usize], skip: bool, offset: usize| Mlp {
        inputs,
        widths: widths.to_vec(),
        act,
        skip,
        offset,
    };
    let free = |_: WeightRole| Transform::Free;
    let aux_w = l.aux_hidden.clone().unwrap_or_default();
    match kind {
        ArchitectureKind::Free => {
            let main = mlp(l.all_inputs(), &l.hidden, false, 0);
            let t = main.transforms(free);
            (Blocks { main, aux: vec![] }, t)
        }
        ArchitectureKind::MonotoneY => {
            let main = mlp(l.all_inputs(), &l.hidden, false, 0);
            let y = l.y_index();
            let inputs = main.inputs.clone();
            let t = main.transforms(|r| match r {
                WeightRole::Input { layer: 0, index } if inputs[index] == y => Transform::Neg,
                WeightRole::Hidden => Transform::Pos,
                _ => Transform::Free,
            });
            (Blocks { main, aux: vec![] }, t)
        }
        ArchitectureKind::IcnnYZ => {
            let main = mlp(l.all_inputs(), &l.hidden, true, 0);
            let t = main.transforms(|r| match r {
                WeightRole::Hidden => Transform::Pos,
                _ => Transform::Free,
            });
            (Blocks { main, aux: vec![] }, t)
        }
        ArchitectureKind::Separable => {
            let main = mlp(l.txz_inputs(), &l.hidden, false, 0);
            let n2 = mlp(vec![l.y_index()], &aux_w, false, main.n_params());
            let mut t = main.transforms(free);
            if l.monotone_aux {
                t.extend(n2.transforms(|r| match r {
                    WeightRole::Input { layer: 0, .. } => Transform::Neg,
                    _ => Transform::Pos,
                }));
            } else {
                t.extend(n2.transforms(free));
            }
            (Blocks { main, aux: vec![n2] }, t)
        }
        ArchitectureKind::BoundedInteraction => {
            let main = mlp(l.txz_inputs(), &l.hidden, false, 0);
            let n2 = mlp(l.txz_inputs(), &aux_w, false, main.n_params());
            let n3 = mlp(vec![l.y_index()], &aux_w, false, main.n_params() + n2.n_params());
            let mut t = main.transforms(free);
            t.extend(n2.transforms(free));
            t.extend(n3.transforms(free));
            (
                Blocks {
                    main,
                    aux: vec![n2, n3],
                },
                t,
            )
        }
    }
}

/// Builds a driver network with raw parameters drawn from a small symmetric
/// distribution (sign-constrained entries are centred so that their
/// effective weights start near 0.2).
pub fn build_driver(kind: ArchitectureKind, layout: Layout, init_seed: u64) -> Result<DriverNet> {
    validate(kind, &layout)?;
    let (_, transforms) = assemble(kind, &layout);
    let mut rng = Stream::new(derive_seed(init_seed, "driver-init"), 0);
    let raw = transforms
        .iter()
        .map(|t| {
            let centre = if *t == Transform::Free { 0.0 } else { -1.5 };
            centre + 0.5 * rng.normal()
        })
        .collect();
    DriverNet::from_raw(kind, layout, raw)
}

impl DriverNet {
    /// Builds a network from an explicit raw parameter vector.
    pub fn from_raw(kind: ArchitectureKind, layout: Layout, raw: Vec<f64>) -> Result<Self> {
        validate(kind, &layout)?;
        let (blocks, transforms) = assemble(kind, &layout);
        if raw.len() != transforms.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                transforms.len(),
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        let eff = raw.iter().zip(&transforms).map(|(r, t)| t.apply(*r)).collect();
        Ok(DriverNet {
            kind,
            layout,
            blocks,
            transforms,
            raw,
            eff,
        })
    }

    /// Builds a network whose effective weights equal `eff` (up to rounding
    /// in the inverse softplus). Sign-constrained entries must be strictly
    /// inside their allowed half-line.
    pub fn from_effective(kind: ArchitectureKind, layout: Layout, eff: &[f64]) -> Result<Self> {
        validate(kind, &layout)?;
        let (_, transforms) = assemble(kind, &layout);
        if eff.len() != transforms.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                transforms.len(),
                eff.len()
            )));
        }
        let raw = eff
            .iter()
            .zip(&transforms)
            .enumerate()
            .map(|(i, (&e, t))| match t {
                Transform::Free => Ok(e),
                Transform::Pos if e > 0.0 => Ok(softplus_inverse(e)),
                Transform::Neg if e < 0.0 => Ok(softplus_inverse(-e)),
                _ => Err(Error::InvalidArgument(format!(
                    "effective parameter {i} = {e} violates its sign constraint"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(kind, layout, raw)
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.kind
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.raw.len()
    }

    pub fn raw_params(&self) -> &[f64] {
        &self.raw
    }

    pub fn effective_params(&self) -> &[f64] {
        &self.eff
    }

    /// Number of effective weights outside their required sign.
    pub fn constraint_violations(&self) -> usize {
        self.eff
            .iter()
            .zip(&self.transforms)
            .filter(|(e, t)| match t {
                Transform::Free => false,
                Transform::Pos => !(**e >= 0.0),
                Transform::Neg => !(**e <= 0.0),
            })
            .count()
    }

    /// Indices of sign-constrained parameters and whether each must be
    /// non-negative (`true`) or non-positive (`false`).
    pub fn sign_constraints(&self) -> Vec<(usize, bool)> {
        self.transforms
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Transform::Free => None,
                Transform::Pos => Some((i, true)),
                Transform::Neg => Some((i, false)),
            })
            .collect()
    }

    /// The bounded factor `M2 tanh(N2(t, x, z))` of a bounded-interaction
    /// net, `None` for other kinds.
    pub fn interaction_factor(&self, t: f64, x: &[f64], z: &[f64]) -> Option<f64> {
        let m = self.layout.bound?;
        let u = self.input(t, x, 0.0, z);
        Some(m * self.blocks.aux[0].forward(&self.eff, &u, None).tanh())
    }

    fn input(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.layout.x_dim, "x dimension");
        assert_eq!(z.len(), self.layout.z_dim, "z dimension");
        let mut u = Vec::with_capacity(self.layout.input_len());
        u.push(t);
        u.extend_from_slice(x);
        u.push(y);
        u.extend_from_slice(z);
        u
    }

    fn value(&self, u: &[f64]) -> f64 {
        let main = self.blocks.main.forward(&self.eff, u, None);
        match self.kind {
            ArchitectureKind::Separable => main + self.blocks.aux[0].forward(&self.eff, u, None),
            ArchitectureKind::BoundedInteraction => {
                let m = self.layout.bound.unwrap_or(0.0);
                let a = self.blocks.aux[0].forward(&self.eff, u, None);
                let c = self.blocks.aux[1].forward(&self.eff, u, None);
                main + m * a.tanh() * c
            }
            _ => main,
        }
    }

    /// Text form: a header line, `key value` lines, then the raw parameters
    /// in shortest round-trip decimal.
    pub fn to_text(&self) -> String {
        let l = &self.layout;
        let widths = |w: &[usize]| w.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::from("nexp-driver 1\n");
        s += &format!("kind {}\n", self.kind);
        s += &format!("x_dim {}\n", l.x_dim);
        s += &format!("z_dim {}\n", l.z_dim);
        s += &format!("hidden {}\n", widths(&l.hidden)).replace(" \n", "\n");
        match &l.aux_hidden {
            Some(a) => s += &format!("aux_hidden {}\n", widths(a)).replace(" \n", "\n"),
            None => s += "aux_hidden none\n",
        }
        s += &format!("activation {}\n", l.activation);
        match l.bound {
            Some(m) => s += &format!("bound {m}\n"),
            None => s += "bound none\n",
        }
        s += &format!("monotone_aux {}\n", l.monotone_aux);
        s += &format!("params {}\n", self.raw.len());
        s += &self.raw.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
        s.push('\n');
        s
    }

    /// Parses the output of [`DriverNet::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |m: &str| Error::Parse(m.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("nexp-driver 1") {
            return Err(perr("missing 'nexp-driver 1' header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| perr(&format!("missing '{key}'")))?;
            let rest = line
                .strip_prefix(key)
                .filter(|r| r.is_empty() || r.starts_with(' '))
                .ok_or_else(|| perr(&format!("expected '{key}', found '{line}'")))?;
            Ok(rest.trim().to_string())
        };
        let usize_of = |s: &str| s.parse::<usize>().map_err(|_| perr(&format!("bad integer '{s}'")));
        let widths_of = |s: &str| s.split_whitespace().map(usize_of).collect::<Result<Vec<_>>>();
        let kind: ArchitectureKind = field("kind")?.parse()?;
        let x_dim = usize_of(&field("x_dim")?)?;
        let z_dim = usize_of(&field("z_dim")?)?;
        let hidden = widths_of(&field("hidden")?)?;
        let aux = field("aux_hidden")?;
        let aux_hidden = if aux == "none" { None } else { Some(widths_of(&aux)?) };
        let activation: Activation = field("activation")?.parse()?;
        let b = field("bound")?;
        let bound = if b == "none" {
            None
        } else {
            Some(b.parse::<f64>().map_err(|_| perr(&format!("bad bound '{b}'")))?)
        };
        let monotone_aux = match field("monotone_aux")?.as_str() {
            "true" => true,
            "false" => false,
            o => return Err(perr(&format!("bad monotone_aux '{o}'"))),
        };
        let n = usize_of(&field("params")?)?;
        let raw = lines
            .flat_map(str::split_whitespace)
            .map(|s| s.parse::<f64>().map_err(|_| perr(&format!("bad parameter '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        if raw.len() != n {
            return Err(perr(&format!("declared {n} parameters, found {}", raw.len())));
        }
        let layout = Layout {
            x_dim,
            z_dim,
            hidden,
            aux_hidden,
            activation,
            bound,
            monotone_aux,
        };
        Self::from_raw(kind, layout, raw)
    }
}

impl Driver for DriverNet {
    fn x_dim(&self) -> Option<usize> {
        Some(self.layout.x_dim)
    }

    fn z_dim(&self) -> Option<usize> {
        Some(self.layout.z_dim)
    }

    fn params(&self) -> &[f64] {
        &self.raw
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        self.value(&self.input(t, x, y, z))
    }

    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverGradients {
        let u = self.input(t, x, y, z);
        let mut ge = vec![0.0; self.eff.len()];
        let mut gu = vec![0.0; u.len()];
        let mut tape = Tape::default();
        let mut value = self.blocks.main.forward(&self.eff, &u, Some(&mut tape));
        self.blocks.main.backward(&self.eff, &tape, 1.0, &mut ge, &mut gu);
        match self.kind {
            ArchitectureKind::Separable => {
                let n2 = &self.blocks.aux[0];
                value += n2.forward(&self.eff, &u, Some(&mut tape));
                n2.backward(&self.eff, &tape, 1.0, &mut ge, &mut gu);
            }
            ArchitectureKind::BoundedInteraction => {
                let m = self.layout.bound.unwrap_or(0.0);
                let (n2, n3) = (&self.blocks.aux[0], &self.blocks.aux[1]);
                let mut tape3 = Tape::default();
                let a = n2.forward(&self.eff, &u, Some(&mut tape));
                let c = n3.forward(&self.eff, &u, Some(&mut tape3));
                let th = a.tanh();
                value += m * th * c;
                n2.backward(&self.eff, &tape, m * (1.0 - th * th) * c, &mut ge, &mut gu);
                n3.backward(&self.eff, &tape3, m * th, &mut ge, &mut gu);
            }
            _ => {}
        }
        let dtheta = ge
            .iter()
            .zip(self.raw.iter().zip(&self.transforms))
            .map(|(g, (r, t))| g * t.derivative(*r))
            .collect();
        DriverGradients {
            value,
            dy: gu[self.layout.y_index()],
            dz: gu[self.layout.z_indices()].to_vec(),
            dtheta,
        }
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::from_raw(self.kind, self.layout.clone(), params.to_vec())
    }
}

/// Checked evaluation: rejects mismatched dimensions and non-finite inputs.
pub fn eval_driver(net: &DriverNet, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
    let l = net.layout();
    if x.len() != l.x_dim || z.len() != l.z_dim {
        return Err(Error::InvalidArgument(format!(
            "expected x of length {} and z of length {}",
            l.x_dim, l.z_dim
        )));
    }
    if !t.is_finite() || !y.is_finite() || x.iter().chain(z).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("driver inputs must be finite".into()));
    }
    Ok(net.eval(t, x, y, z))
}
