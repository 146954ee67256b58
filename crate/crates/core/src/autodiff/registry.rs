//! Derivative rules for elementwise primitives, with one-shot overrides.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::AdError;

/// An elementwise primitive. The primal belongs to the primitive itself, so
/// registering derivative rules can never change forward results.
#[derive(Clone, Copy)]
pub struct UnaryPrimitive {
    pub id: &'static str,
    pub primal: fn(f64) -> f64,
    /// Inputs outside the domain are rejected with [`AdError::Domain`].
    pub in_domain: fn(f64) -> bool,
}

impl fmt::Debug for UnaryPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UnaryPrimitive({})", self.id)
    }
}

fn always(_: f64) -> bool {
    true
}

fn non_negative(x: f64) -> bool {
    x >= 0.0
}

fn square(x: f64) -> f64 {
    x * x
}

pub const SQRT: UnaryPrimitive = UnaryPrimitive {
    id: "sqrt",
    primal: f64::sqrt,
    in_domain: non_negative,
};

pub const EXP: UnaryPrimitive = UnaryPrimitive {
    id: "exp",
    primal: f64::exp,
    in_domain: always,
};

pub const SQUARE: UnaryPrimitive = UnaryPrimitive {
    id: "square",
    primal: square,
    in_domain: always,
};

/// `(x, tangent) -> output tangent`
pub type ForwardRule = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// `(x, output cotangent) -> input cotangent`
pub type BackwardRule = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct CustomGradientEntry {
    pub primitive: String,
    pub forward: ForwardRule,
    pub backward: BackwardRule,
}

impl fmt::Debug for CustomGradientEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomGradientEntry({})", self.primitive)
    }
}

impl CustomGradientEntry {
    /// Both rules multiply by the same local derivative.
    pub fn from_derivative(
        primitive: &str,
        deriv: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static,
    ) -> Self {
        let d2 = deriv.clone();
        CustomGradientEntry {
            primitive: primitive.to_string(),
            forward: Arc::new(move |x, t| deriv(x) * t),
            backward: Arc::new(move |x, c| d2(x) * c),
        }
    }
}

/// Default regularisation floor of [`sqrt_reg_entry`].
pub const DEFAULT_EPS_REG: f64 = 1e-12;

/// Local derivative of the regularised square root: `1 / (2 sqrt(max(x, eps)))`.
pub fn sqrt_reg_derivative(x: f64, eps: f64) -> f64 {
    // ties go to the x branch; the value is identical either way
    let clamped = if x >= eps { x } else { eps };
    1.0 / (2.0 * clamped.sqrt())
}

/// Square root whose derivative is bounded at the origin. The primal is the
/// exact square root.
pub fn sqrt_reg(x: f64) -> Result<f64, AdError> {
    if !(SQRT.in_domain)(x) || x.is_nan() {
        return Err(AdError::Domain {
            primitive: SQRT.id.to_string(),
            value: x,
        });
    }
    Ok(x.sqrt())
}

/// Override for [`SQRT`] that keeps the primal and bounds the gradient.
pub fn sqrt_reg_entry(eps: f64) -> CustomGradientEntry {
    CustomGradientEntry::from_derivative(SQRT.id, move |x| sqrt_reg_derivative(x, eps))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryHandle {
    pub primitive: String,
}

/// Built-in rules plus at most one custom override per primitive. Written
/// during setup, read-only afterwards.
#[derive(Clone)]
pub struct GradientRegistry {
    builtin: HashMap<String, CustomGradientEntry>,
    custom: HashMap<String, CustomGradientEntry>,
}

impl fmt::Debug for GradientRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut b: Vec<_> = self.builtin.keys().collect();
        let mut c: Vec<_> = self.custom.keys().collect();
        b.sort();
        c.sort();
        f.debug_struct("GradientRegistry")
            .field("builtin", &b)
            .field("custom", &c)
            .finish()
    }
}

impl Default for GradientRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientRegistry {
    /// Exact derivative rules for the built-in elementwise primitives.
    pub fn new() -> Self {
        let mut builtin = HashMap::new();
        for e in [
            CustomGradientEntry::from_derivative(SQRT.id, |x: f64| 0.5 / x.sqrt()),
            CustomGradientEntry::from_derivative(EXP.id, f64::exp),
            CustomGradientEntry::from_derivative(SQUARE.id, |x: f64| 2.0 * x),
        ] {
            builtin.insert(e.primitive.clone(), e);
        }
        GradientRegistry {
            builtin,
            custom: HashMap::new(),
        }
    }

    /// The registry the model runs with: built-ins plus the regularised square root.
    pub fn standard(eps_reg: f64) -> Self {
        let mut r = Self::new();
        r.register_custom_gradient(sqrt_reg_entry(eps_reg))
            .expect("fresh registry has no overrides");
        r
    }

    pub fn register_custom_gradient(
        &mut self,
        entry: CustomGradientEntry,
    ) -> Result<RegistryHandle, AdError> {
        if self.custom.contains_key(&entry.primitive) {
            return Err(AdError::DuplicateRegistration(entry.primitive));
        }
        let handle = RegistryHandle {
            primitive: entry.primitive.clone(),
        };
        self.custom.insert(entry.primitive.clone(), entry);
        Ok(handle)
    }

    pub fn is_overridden(&self, primitive: &str) -> bool {
        self.custom.contains_key(primitive)
    }

    pub fn lookup(&self, primitive: &str) -> Result<&CustomGradientEntry, AdError> {
        self.custom
            .get(primitive)
            .or_else(|| self.builtin.get(primitive))
            .ok_or_else(|| AdError::UnregisteredPrimitive(primitive.to_string()))
    }
}
