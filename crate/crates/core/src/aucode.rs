//! Action Unit vectors: schema, validation, interpolation, target sampling,
//! and named expression presets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// One schema slot: the FACS AU number and its descriptive name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuEntry {
    pub facs: u32,
    pub name: String,
}

impl fmt::Display for AuEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{} {}", self.facs, self.name)
    }
}

/// Ordered list of the AUs a model is conditioned on. Position `i` in an
/// [`AuVector`] refers to `entries[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuSchema {
    entries: Vec<AuEntry>,
}

const DEFAULT_AUS: [(u32, &str); 14] = [
    (1, "Inner Brow Raiser"),
    (2, "Outer Brow Raiser"),
    (4, "Brow Lowerer"),
    (5, "Upper Lid Raiser"),
    (6, "Cheek Raiser"),
    (7, "Lid Tightener"),
    (9, "Nose Wrinkler"),
    (10, "Upper Lip Raiser"),
    (12, "Lip Corner Puller"),
    (15, "Lip Corner Depressor"),
    (20, "Lip Stretcher"),
    (25, "Lips Part"),
    (26, "Jaw Drop"),
    (45, "Blink"),
];

impl Default for AuSchema {
    fn default() -> Self {
        AuSchema::new(
            DEFAULT_AUS
                .iter()
                .map(|&(facs, name)| AuEntry {
                    facs,
                    name: name.to_string(),
                })
                .collect(),
        )
        .expect("default schema is valid")
    }
}

impl AuSchema {
    pub fn new(entries: Vec<AuEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("AU schema needs at least one entry"));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.facs == e.facs || p.name == e.name) {
                return Err(Error::invalid(format!("duplicate AU in schema: {e}")));
            }
        }
        Ok(AuSchema { entries })
    }

    /// Generic schema of `n` AUs numbered 1..=n.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new(
            (1..=n as u32)
                .map(|i| AuEntry {
                    facs: i,
                    name: format!("Unit {i}"),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AuEntry] {
        &self.entries
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(ToString::to_string).collect()
    }

    /// Schema position of a FACS AU number.
    pub fn position(&self, facs: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.facs == facs)
    }

    /// Parses `<facs-number> <name>` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, name) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: "expected `<index> <name>`".into(),
            })?;
            let facs = idx.parse().map_err(|_| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("bad AU index `{idx}`"),
            })?;
            entries.push(AuEntry {
                facs,
                name: name.trim().to_string(),
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {}\n", e.facs, e.name))
            .collect()
    }

    pub fn zeros(&self) -> AuVector {
        AuVector(vec![0.0; self.len()])
    }
}

/// AU activations, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuVector(Vec<f64>);

/// Result of [`validate`]: the clamped vector and how many entries moved.
#[derive(Clone, Debug, PartialEq)]
pub struct Validated {
    pub vector: AuVector,
    pub clamped: usize,
}

impl AuVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Clamps into `[0, 1]` without a schema check.
    pub fn clamped(values: Vec<f64>) -> Self {
        AuVector(values.into_iter().map(clamp_unit).collect())
    }

    /// Copy with entry `i` replaced (clamped).
    pub fn with(&self, i: usize, v: f64) -> Self {
        let mut out = self.0.clone();
        out[i] = clamp_unit(v);
        AuVector(out)
    }

    /// Mean absolute difference.
    pub fn mae(&self, other: &AuVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.0.len().max(1) as f64
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Checks the length against `schema` and clamps entries into `[0, 1]`.
pub fn validate(values: &[f64], schema: &AuSchema) -> Result<Validated> {
    if values.len() != schema.len() {
        return Err(Error::AuLength {
            expected: schema.len(),
            got: values.len(),
        });
    }
    let mut clamped = 0;
    let out = values
        .iter()
        .map(|&v| {
            let c = clamp_unit(v);
            if c != v {
                clamped += 1;
            }
            c
        })
        .collect();
    if clamped > 0 {
        log::warn!("clamped {clamped} AU value(s) into [0, 1]");
    }
    Ok(Validated {
        vector: AuVector(out),
        clamped,
    })
}

/// `alpha * target + (1 - alpha) * source`, evaluated as
/// `source + alpha * (target - source)`.
pub fn interpolate(source: &AuVector, target: &AuVector, alpha: f64) -> Result<AuVector> {
    if source.len() != target.len() {
        return Err(Error::AuLength {
            expected: source.len(),
            got: target.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(source.clone());
    }
    if alpha == 1.0 {
        return Ok(target.clone());
    }
    Ok(AuVector(
        source
            .0
            .iter()
            .zip(&target.0)
            .map(|(&r, &g)| clamp_unit(r + alpha * (g - r)))
            .collect(),
    ))
}

/// How training targets are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetStrategy {
    /// A real annotation from the pool, uniformly.
    #[default]
    PoolDraw,
    /// Every component i.i.d. uniform on `[0, 1]`.
    Uniform,
}

impl std::str::FromStr for TargetStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" | "pool-draw" => Ok(TargetStrategy::PoolDraw),
            "uniform" => Ok(TargetStrategy::Uniform),
            _ => Err(Error::invalid(format!("unknown target strategy `{s}`"))),
        }
    }
}

impl fmt::Display for TargetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetStrategy::PoolDraw => "pool",
            TargetStrategy::Uniform => "uniform",
        })
    }
}

pub fn sample_target<R: Rng + ?Sized>(
    pool: &[&AuVector],
    strategy: TargetStrategy,
    rng: &mut R,
) -> Result<AuVector> {
    let first = pool.first().ok_or_else(|| Error::invalid("empty annotation pool"))?;
    Ok(match strategy {
        TargetStrategy::PoolDraw => pool[rng.random_range(0..pool.len())].clone(),
        TargetStrategy::Uniform => AuVector((0..first.len()).map(|_| rng.random::<f64>()).collect()),
    })
}

/// A sparse expression over FACS AU numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionPreset {
    pub name: String,
    pub activations: BTreeMap<u32, f64>,
}

/// Named presets. Intensities are keyed by FACS AU number and mapped onto a
/// schema when expanded.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetBook {
    presets: BTreeMap<String, EmotionPreset>,
}

impl Default for PresetBook {
    /// `fear` uses AUs 1, 2, 4, 5, 7, 20 and 26. `smile` is AU6 + AU12 with
    /// slightly parted lips (AU25). `surprise` and `sadness` follow the
    /// usual prototypes.
    fn default() -> Self {
        let mut book = PresetBook {
            presets: BTreeMap::new(),
        };
        let table: [(&str, &[(u32, f64)]); 5] = [
            ("neutral", &[]),
            (
                "fear",
                &[(1, 0.8), (2, 0.6), (4, 0.5), (5, 0.8), (7, 0.5), (20, 0.6), (26, 0.6)],
            ),
            ("smile", &[(6, 0.6), (12, 1.0), (25, 0.3)]),
            ("surprise", &[(1, 0.8), (2, 0.8), (5, 0.7), (26, 0.8)]),
            ("sadness", &[(1, 0.7), (4, 0.6), (15, 0.8)]),
        ];
        for (name, acts) in table {
            book.presets.insert(
                name.to_string(),
                EmotionPreset {
                    name: name.to_string(),
                    activations: acts.iter().copied().collect(),
                },
            );
        }
        book
    }
}

impl PresetBook {
    pub fn empty() -> Self {
        PresetBook {
            presets: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.presets.keys().cloned().collect()
    }

    pub fn insert(&mut self, preset: EmotionPreset) -> Result<()> {
        for (&au, &v) in &preset.activations {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!(
                    "preset `{}`: AU{au} intensity {v} outside (0, 1]",
                    preset.name
                )));
            }
        }
        self.presets.insert(preset.name.clone(), preset);
        Ok(())
    }

    /// Dense vector for `name` over `schema`; unspecified AUs are 0.
    pub fn preset(&self, name: &str, schema: &AuSchema) -> Result<AuVector> {
        let p = self.presets.get(name).ok_or_else(|| Error::UnknownPreset {
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        let mut v = vec![0.0; schema.len()];
        for (&au, &intensity) in &p.activations {
            let pos = schema.position(au).ok_or_else(|| {
                Error::invalid(format!("preset `{name}` uses AU{au}, which is not in the schema"))
            })?;
            v[pos] = intensity;
        }
        Ok(AuVector(v))
    }

    /// Parses `<name>: <au>=<intensity>,...` lines (AU = FACS number).
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut book = PresetBook::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (name, rest) = line
                .split_once(':')
                .ok_or_else(|| err("expected `<name>: <au>=<intensity>,...`".into()))?;
            let mut activations = BTreeMap::new();
            for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (au, val) = item
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected `<au>=<intensity>`, got `{item}`")))?;
                let au: u32 = au.trim().parse().map_err(|_| err(format!("bad AU index `{au}`")))?;
                let val: f64 = val.trim().parse().map_err(|_| err(format!("bad intensity `{val}`")))?;
                activations.insert(au, val);
            }
            book.insert(EmotionPreset {
                name: name.trim().to_string(),
                activations,
            })
            .map_err(|e| err(e.to_string()))?;
        }
        Ok(book)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Parses the CLI form `"<pos>:<val>,..."` (schema positions) into a dense
/// vector over `n` AUs.
pub fn parse_sparse(spec: &str, n: usize) -> Result<AuVector> {
    let mut v = vec![0.0; n];
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (i, val) = item
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("expected `<index>:<value>`, got `{item}`")))?;
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad AU index `{i}`")))?;
        if i >= n {
            return Err(Error::invalid(format!("AU index {i} out of range for N={n}")));
        }
        v[i] = val
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad AU value `{val}`")))?;
    }
    Ok(AuVector::clamped(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded;
    use proptest::prelude::*;

    #[test]
    fn in_range_values_pass_unchanged() {
        let s = AuSchema::numbered(3).unwrap();
        let v = validate(&[0.0, 0.5, 1.0], &s).unwrap();
        assert_eq!(v.vector.values(), &[0.0, 0.5, 1.0]);
        assert_eq!(v.clamped, 0);
    }

    #[test]
    fn out_of_range_values_are_clamped_and_counted() {
        let s = AuSchema::numbered(2).unwrap();
        let v = validate(&[-0.1, 1.2], &s).unwrap();
        assert_eq!(v.vector.values(), &[0.0, 1.0]);
        assert_eq!(v.clamped, 2);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let s = AuSchema::default();
        assert_eq!(s.len(), 14);
        assert!(matches!(
            validate(&[0.0; 5], &s),
            Err(Error::AuLength { expected: 14, got: 5 })
        ));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let r = AuVector(vec![0.0, 1.0]);
        let g = AuVector(vec![1.0, 0.0]);
        assert_eq!(interpolate(&r, &g, 0.0).unwrap(), r);
        assert_eq!(interpolate(&r, &g, 1.0).unwrap(), g);
        assert_eq!(interpolate(&r, &g, 0.5).unwrap().values(), &[0.5, 0.5]);
        let z = AuVector(vec![0.0, 0.0]);
        let o = AuVector(vec![1.0, 1.0]);
        let v = interpolate(&z, &o, 0.33).unwrap();
        assert!(v.values().iter().all(|x| (x - 0.33).abs() < 1e-15));
        assert!(interpolate(&r, &g, 1.5).is_err());
        assert!(interpolate(&r, &g, -0.1).is_err());
    }

    #[test]
    fn pool_of_one_always_returns_it() {
        let v = AuVector(vec![0.2, 0.4]);
        let mut rng = seeded(1);
        for _ in 0..10 {
            assert_eq!(sample_target(&[&v], TargetStrategy::PoolDraw, &mut rng).unwrap(), v);
        }
        assert!(sample_target(&[], TargetStrategy::PoolDraw, &mut rng).is_err());
    }

    #[test]
    fn pool_draws_are_reproducible() {
        let a = AuVector(vec![0.0]);
        let b = AuVector(vec![1.0]);
        let draw = |seed| {
            let mut rng = seeded(seed);
            (0..32)
                .map(|_| sample_target(&[&a, &b], TargetStrategy::PoolDraw, &mut rng).unwrap().get(0))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert!(draw(7).contains(&0.0) && draw(7).contains(&1.0));
    }

    #[test]
    fn uniform_draws_have_mean_one_half() {
        let v = AuVector(vec![0.0; 14]);
        let mut rng = seeded(2024);
        let mut sums = [0.0; 14];
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_target(&[&v], TargetStrategy::Uniform, &mut rng).unwrap();
            for (s, x) in sums.iter_mut().zip(t.values()) {
                *s += x;
            }
        }
        for s in sums {
            assert!((s / draws as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn fear_activates_exactly_its_units() {
        let schema = AuSchema::default();
        let v = PresetBook::default().preset("fear", &schema).unwrap();
        let active: Vec<u32> = schema
            .entries()
            .iter()
            .zip(v.values())
            .filter(|(_, &x)| x > 0.0)
            .map(|(e, _)| e.facs)
            .collect();
        assert_eq!(active, vec![1, 2, 4, 5, 7, 20, 26]);
    }

    #[test]
    fn neutral_and_smile_presets() {
        let schema = AuSchema::default();
        let book = PresetBook::default();
        assert!(book.preset("neutral", &schema).unwrap().values().iter().all(|&x| x == 0.0));
        let smile = book.preset("smile", &schema).unwrap();
        assert!(smile.get(schema.position(12).unwrap()) > 0.0);
        match book.preset("anger", &schema) {
            Err(Error::UnknownPreset { known, .. }) => assert!(known.contains("fear")),
            other => panic!("expected unknown preset, got {other:?}"),
        }
    }

    #[test]
    fn schema_and_preset_files_parse() {
        let s = AuSchema::parse("1 Inner Brow Raiser\n12 Lip Corner Puller\n", "mem").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.entries()[1].to_string(), "AU12 Lip Corner Puller");
        assert_eq!(AuSchema::parse(&s.to_text(), "mem").unwrap(), s);
        assert!(AuSchema::parse("1 A\n1 B\n", "mem").is_err());
        let book = PresetBook::parse("happy: 12=1.0, 1=0.5\n", "mem").unwrap();
        assert_eq!(book.preset("happy", &s).unwrap().values(), &[0.5, 1.0]);
        assert!(matches!(
            PresetBook::parse("x: 12=oops\n", "mem"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn sparse_cli_form() {
        let v = parse_sparse("0:0.5, 3:1.5", 4).unwrap();
        assert_eq!(v.values(), &[0.5, 0.0, 0.0, 1.0]);
        assert!(parse_sparse("4:0.1", 4).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_of_equal_endpoints_is_constant(
            vals in proptest::collection::vec(0.0f64..=1.0, 1..8),
            alpha in 0.0f64..=1.0,
        ) {
            let y = AuVector(vals);
            prop_assert_eq!(interpolate(&y, &y, alpha).unwrap(), y);
        }

        #[test]
        fn interpolation_is_monotone_in_alpha(
            pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..8),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(x, y)| (x.min(y), x.max(y))).unzip();
            let (r, g) = (AuVector(lo), AuVector(hi));
            let (a, b) = (a.min(b), a.max(b));
            let va = interpolate(&r, &g, a).unwrap();
            let vb = interpolate(&r, &g, b).unwrap();
            for (x, y) in va.values().iter().zip(vb.values()) {
                prop_assert!(x <= y);
            }
        }

        #[test]
        fn validation_is_idempotent(vals in proptest::collection::vec(-2.0f64..3.0, 3)) {
            let s = AuSchema::numbered(3).unwrap();
            let once = validate(&vals, &s).unwrap().vector;
            let twice = validate(once.values(), &s).unwrap();
            prop_assert_eq!(twice.clamped, 0);
            prop_assert_eq!(twice.vector, once);
        }
    }
}
