//! TOML pipeline configuration and its validation.

use std::path::Path;

use isothermic_core::dressing::{Alpha, DressingRecord, SimpleElement};
use isothermic_core::geometry::{make_null_basis, NullBasis};
use isothermic_core::{GridSpec, SystemShape, Variant};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub n: usize,
    pub k: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::Hypersurface
}

/// Either explicit null vectors or a seed for the generated basis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub vectors: Option<Vec<Vec<f64>>>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransformConfig {
    Christoffel {
        to_basis: Vec<Vec<f64>>,
    },
    Ribaucour {
        alpha: String,
        v: Vec<f64>,
        #[serde(default)]
        flags: Vec<String>,
    },
    Lie {
        r: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Obj,
    Csv,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub kind: OutputKind,
    pub path: String,
    /// Sequence member for `obj` and `csv`.
    #[serde(default)]
    pub sheet: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Budget for identities that hold up to rounding.
    pub algebraic: f64,
    /// Budget for `|E^T G E - G|` during integration.
    pub drift: f64,
    /// Budget for the two `Y` extractions.
    pub y_cross_check: f64,
    /// Sub-step bound for the frame integrator.
    pub substep_bound: f64,
    /// Optional budget for discretization-limited residuals (off by default).
    pub geometry: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { algebraic: 1e-8, drift: 1e-8, y_cross_check: 1e-6, substep_bound: 0.005, geometry: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Extra spectral values at which frames are kept.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    pub shape: ShapeConfig,
    pub grid: GridSpec,
    #[serde(default)]
    pub recipe: Vec<DressingRecord>,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub transforms: Vec<TransformConfig>,
    #[serde(default)]
    pub outputs: Vec<OutputConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// A validated transform step.
#[derive(Clone, Debug)]
pub enum Step {
    Christoffel(NullBasis<f64>),
    Ribaucour(SimpleElement<f64>),
    Lie(f64),
}

/// Everything `run` needs, checked.
#[derive(Clone, Debug)]
pub struct Validated {
    pub config: PipelineConfig,
    pub shape: SystemShape,
    pub grid: GridSpec,
    pub recipe: Vec<SimpleElement<f64>>,
    pub basis: NullBasis<f64>,
    pub steps: Vec<Step>,
}

fn invalid(what: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{what}: {err}"))
}

fn basis_from(shape: &SystemShape, vectors: &[Vec<f64>], what: &str) -> Result<NullBasis<f64>, CliError> {
    let vs = vectors.iter().map(|v| DVector::from_column_slice(v)).collect();
    NullBasis::new(shape, vs).map_err(|e| invalid(what, e))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<Validated, CliError> {
        let shape = SystemShape::new(self.shape.n, self.shape.k, self.shape.variant).map_err(|e| invalid("shape", e))?;
        let grid = GridSpec::new(self.grid.min.clone(), self.grid.max.clone(), self.grid.nodes.clone()).map_err(|e| invalid("grid", e))?;
        if grid.dim() != shape.n {
            return Err(invalid("grid", format!("{} axes for n = {}", grid.dim(), shape.n)));
        }
        let recipe = self
            .recipe
            .iter()
            .enumerate()
            .map(|(i, r)| r.to_element(shape).map_err(|e| invalid(&format!("recipe[{i}]"), e)))
            .collect::<Result<Vec<_>, _>>()?;
        let basis = match (&self.basis.vectors, self.basis.seed) {
            (Some(_), Some(_)) => return Err(CliError::Config("basis: give either vectors or seed, not both".into())),
            (Some(v), None) => basis_from(&shape, v, "basis")?,
            (None, seed) => make_null_basis(&shape, seed).map_err(|e| invalid("basis", e))?,
        };
        let steps = self
            .transforms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let what = format!("transforms[{i}]");
                match t {
                    TransformConfig::Christoffel { to_basis } => Ok(Step::Christoffel(basis_from(&shape, to_basis, &what)?)),
                    TransformConfig::Ribaucour { alpha, v, flags } => {
                        let rec = DressingRecord { alpha: alpha.clone(), v: v.clone(), flags: flags.clone() };
                        Ok(Step::Ribaucour(rec.to_element(shape).map_err(|e| invalid(&what, e))?))
                    }
                    TransformConfig::Lie { r } if *r > 0.0 && r.is_finite() => Ok(Step::Lie(*r)),
                    TransformConfig::Lie { r } => Err(invalid(&what, format!("lie transform needs r > 0, got {r}"))),
                }
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        for (i, o) in self.outputs.iter().enumerate() {
            if o.kind == OutputKind::Obj && shape.n != 2 {
                return Err(invalid(&format!("outputs[{i}]"), "OBJ export needs n = 2"));
            }
            if o.sheet >= shape.n {
                return Err(invalid(&format!("outputs[{i}]"), format!("sheet {} out of range 0..{}", o.sheet, shape.n)));
            }
        }
        let t = &self.tolerances;
        if ![t.algebraic, t.drift, t.y_cross_check, t.substep_bound].iter().all(|x| *x > 0.0) {
            return Err(CliError::Config("tolerances must be positive".into()));
        }
        Ok(Validated { config: self.clone(), shape, grid, recipe, basis, steps })
    }
}

impl Validated {
    /// Spectral values the frame sheet must carry: the configured ones plus
    /// each Ribaucour pole, pulled back through earlier Lie scalings.
    pub fn lambdas(&self) -> Vec<nalgebra::Complex<f64>> {
        let mut out: Vec<nalgebra::Complex<f64>> = self.config.lambdas.iter().map(|l| nalgebra::Complex::new(*l, 0.0)).collect();
        let mut scale = 1.0;
        for s in &self.steps {
            match s {
                Step::Lie(r) => scale *= r,
                Step::Ribaucour(e) => {
                    let a = match e.alpha {
                        Alpha::Real(a) => nalgebra::Complex::new(a * scale, 0.0),
                        Alpha::Imaginary(t) => nalgebra::Complex::new(0.0, t * scale),
                    };
                    if !out.contains(&a) {
                        out.push(a);
                    }
                }
                Step::Christoffel(_) => {}
            }
        }
        out
    }
}
