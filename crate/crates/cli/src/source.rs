//! Where a spec comes from: an explicit TOML spec of fixed size, or a family
//! file naming a generator that builds a spec for any requested size.

use std::path::Path;

use mixlift::counterexample::SegmentChainSpec;
use mixlift::model::demo_spec;
use mixlift::{Environment, Error, MixtureSpec};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyFile {
    family: String,
    delta: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum SpecSource {
    Fixed(Box<MixtureSpec>),
    Demo,
    Segments { delta: f64 },
}

impl SpecSource {
    pub fn load(path: &Path) -> mixlift::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> mixlift::Result<Self> {
        if let Ok(f) = toml::from_str::<FamilyFile>(text) {
            return match (f.family.as_str(), f.delta) {
                ("demo", None) => Ok(Self::Demo),
                ("segments", Some(delta)) => Ok(Self::Segments { delta }),
                ("segments", None) => Err(Error::Parse("segments family needs `delta`".into())),
                (other, _) => Err(Error::Parse(format!("unknown family `{other}`"))),
            };
        }
        MixtureSpec::from_toml(text).map(|s| Self::Fixed(Box::new(s)))
    }

    /// Side size used when the command gives none.
    pub fn default_n(&self) -> Option<usize> {
        match self {
            Self::Fixed(s) => Some(s.n),
            _ => None,
        }
    }

    pub fn build(&self, n: usize) -> mixlift::Result<MixtureSpec> {
        match self {
            Self::Fixed(s) if s.n == n => Ok((**s).clone()),
            Self::Fixed(s) => Err(Error::Invalid(format!("spec file has n = {}, requested {n}", s.n))),
            Self::Demo => demo_spec(n),
            Self::Segments { delta } => {
                if n % 6 != 0 {
                    return Err(Error::Invalid(format!("segments family needs n divisible by 6, got {n}")));
                }
                SegmentChainSpec::new(n / 6, *delta)?.build()
            }
        }
    }
}

/// An environment read from a file, or sampled from a seed.
pub fn environment(path: Option<&Path>, n: usize, seed: u64) -> mixlift::Result<Environment> {
    let Some(path) = path else {
        return Ok(Environment::sample(n, seed));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let env = Environment::from_toml(&text)?;
    if env.n != n {
        return Err(Error::Dimension { expected: n, found: env.n });
    }
    Ok(env)
}
