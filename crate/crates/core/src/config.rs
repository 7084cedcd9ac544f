//! INI-style scenario files.
//!
//! ```text
//! [run]
//! scenario = 2
//! [observer]
//! variant = range_multi_biased
//! [sources]
//! points = 0 0 0; 0 0 10
//! ```
//!
//! Section headers are optional, but a key placed under the wrong header is
//! rejected. Every key is optional; missing ones take the values of the chosen
//! published scenario (scenario 1 with `dir_biased_single` by default).

use std::collections::HashMap;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::ltv::SourceGeometry;
use crate::observers::ObserverKind;
use crate::sim::{SampledPath, ScenarioConfig, Trajectory};

const KEYS: &[(&str, &str)] = &[
    ("scenario", "run"),
    ("h", "run"),
    ("horizon", "run"),
    ("kind", "trajectory"),
    ("offset", "trajectory"),
    ("cos_amp", "trajectory"),
    ("sin_amp", "trajectory"),
    ("omega", "trajectory"),
    ("center", "trajectory"),
    ("radius", "trajectory"),
    ("position", "trajectory"),
    ("start", "trajectory"),
    ("velocity", "trajectory"),
    ("samples", "trajectory"),
    ("bias_a", "trajectory"),
    ("range_bias_b", "trajectory"),
    ("points", "sources"),
    ("alpha", "sources"),
    ("variant", "observer"),
    ("velocity_mode", "observer"),
    ("xhat0", "observer"),
    ("ahat0", "observer"),
    ("p0_scale", "observer"),
    ("k1", "observer"),
    ("k2", "observer"),
    ("k", "gains"),
    ("q_scale", "gains"),
    ("eps_v", "gains"),
    ("v_diag", "gains"),
    ("vel_std", "noise"),
    ("pos_std", "noise"),
    ("seed", "noise"),
];

const SECTIONS: &[&str] = &["run", "trajectory", "sources", "observer", "gains", "noise"];

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Line(usize),
    Override(usize),
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

fn err_at(origin: Origin, msg: impl Into<String>) -> Error {
    match origin {
        Origin::Line(line) => Error::ConfigLine { line, msg: msg.into() },
        Origin::Override(i) => Error::InvalidConfig(format!("--set #{}: {}", i + 1, msg.into())),
    }
}

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|(_, s)| *s)
}

fn split_assignment(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

fn read_entries(text: &str, overrides: &[String]) -> Result<HashMap<String, Entry>> {
    let mut entries: HashMap<String, Entry> = HashMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        // `;` separates rows inside values, so it only starts a comment at the beginning of a line
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err_at(origin, format!("malformed section header '{line}'")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err_at(origin, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) =
            split_assignment(line).ok_or_else(|| err_at(origin, format!("expected 'key = value', got '{line}'")))?;
        let home = section_of(&key).ok_or_else(|| err_at(origin, format!("unknown key '{key}'")))?;
        if let Some(s) = &section {
            if s != home {
                return Err(err_at(origin, format!("key '{key}' belongs in [{home}], not [{s}]")));
            }
        }
        if let Some(prev) = entries.get(&key) {
            let Origin::Line(l) = prev.origin else { unreachable!() };
            return Err(err_at(origin, format!("duplicate key '{key}' (first set on line {l})")));
        }
        entries.insert(key, Entry { value, origin });
    }
    for (i, o) in overrides.iter().enumerate() {
        let origin = Origin::Override(i);
        let (key, value) = split_assignment(o).ok_or_else(|| err_at(origin, format!("expected key=value, got '{o}'")))?;
        if section_of(&key).is_none() {
            return Err(err_at(origin, format!("unknown key '{key}'")));
        }
        entries.insert(key, Entry { value, origin });
    }
    Ok(entries)
}

struct Reader {
    entries: HashMap<String, Entry>,
}

impl Reader {
    fn raw(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn origin(&self, key: &str) -> Origin {
        self.entries.get(key).map_or(Origin::Override(usize::MAX), |e| e.origin)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|e| e.value.parse::<T>().map_err(|_| err_at(e.origin, format!("{key}: expected {what}, got '{}'", e.value))))
            .transpose()
    }

    fn real(&self, key: &str) -> Result<Option<f64>> {
        let v = self.parse::<f64>(key, "a number")?;
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(err_at(self.origin(key), format!("{key} must be finite")));
            }
        }
        Ok(v)
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key).map(|e| parse_list(&e.value).map_err(|m| err_at(e.origin, format!("{key}: {m}")))).transpose()
    }

    fn vector(&self, key: &str, n: usize) -> Result<Option<DVector<f64>>> {
        match self.list(key)? {
            Some(v) if v.len() != n => {
                Err(err_at(self.origin(key), format!("{key} needs {n} numbers, got {}", v.len())))
            }
            Some(v) => Ok(Some(DVector::from_vec(v))),
            None => Ok(None),
        }
    }

    fn rows(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>> {
        self.raw(key)
            .map(|e| {
                e.value
                    .split(';')
                    .map(str::trim)
                    .filter(|r| !r.is_empty())
                    .map(|r| parse_list(r).map_err(|m| err_at(e.origin, format!("{key}: {m}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|e| match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(err_at(e.origin, format!("{key}: expected true or false, got '{}'", e.value))),
            })
            .transpose()
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("'{t}' is not a finite number")),
        })
        .collect()
}

/// Parses a scenario file with defaults applied. Equivalent to
/// [`parse_config_with_overrides`] with no overrides.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    parse_config_with_overrides(text, &[])
}

/// Parses a scenario file, then applies `key=value` overrides (which replace file values).
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ScenarioConfig> {
    let r = Reader { entries: read_entries(text, overrides)? };

    let scenario = r.parse::<u8>("scenario", "1, 2 or 3")?.unwrap_or(1);
    let kind = match r.raw("variant") {
        Some(e) => e.value.parse::<ObserverKind>().map_err(|_| {
            let names: Vec<_> = ObserverKind::ALL.iter().map(|k| k.name()).collect();
            err_at(e.origin, format!("unknown variant '{}' (expected one of {})", e.value, names.join(", ")))
        })?,
        None => ObserverKind::DirBiasedSingle,
    };
    let mut cfg = ScenarioConfig::preset(scenario, kind).map_err(|e| match r.raw("scenario") {
        Some(en) => err_at(en.origin, e.to_string()),
        None => err_at(r.origin("variant"), e.to_string()),
    })?;

    apply_trajectory(&r, &mut cfg)?;
    let n = cfg.trajectory.dim();
    apply_sources(&r, &mut cfg, n)?;

    if let Some(v) = r.vector("bias_a", n)? {
        cfg.bias_a = v;
    }
    if let Some(v) = r.real("range_bias_b")? {
        cfg.range_bias_b = v;
    }
    if let Some(v) = r.vector("xhat0", n)? {
        cfg.xhat0 = v;
    }
    if let Some(v) = r.vector("ahat0", n)? {
        cfg.ahat0 = v;
    }
    if cfg.bias_a.len() != n {
        cfg.bias_a = DVector::zeros(n);
    }
    if cfg.xhat0.len() != n || cfg.ahat0.len() != n {
        return Err(Error::InvalidConfig(format!(
            "the trajectory is {n}-dimensional; set xhat0 and ahat0 to match"
        )));
    }
    if let Some(v) = r.boolean("velocity_mode")? {
        cfg.velocity_mode = v;
    }
    let reals: [(&str, &mut f64); 11] = [
        ("h", &mut cfg.h),
        ("horizon", &mut cfg.horizon),
        ("p0_scale", &mut cfg.p0_scale),
        ("k1", &mut cfg.k1),
        ("k2", &mut cfg.k2),
        ("k", &mut cfg.k),
        ("q_scale", &mut cfg.q_scale),
        ("eps_v", &mut cfg.eps_v),
        ("vel_std", &mut cfg.noise_vel_std),
        ("pos_std", &mut cfg.noise_pos_std),
        ("range_bias_b", &mut cfg.range_bias_b),
    ];
    for (key, slot) in reals {
        if let Some(v) = r.real(key)? {
            *slot = v;
        }
    }
    if let Some(s) = r.parse::<u64>("seed", "a nonnegative integer")? {
        cfg.seed = s;
    }
    if let Some(d) = r.list("v_diag")? {
        cfg.v_diag = Some(d);
    }

    cfg.validate().map_err(|e| {
        // point at the most likely culprit
        let blame = ["v_diag", "alpha", "points", "variant", "velocity_mode", "k", "h", "horizon"]
            .into_iter()
            .find(|k| r.raw(k).is_some() && e.to_string().contains(k.trim_end_matches('s')));
        match (blame, e) {
            (Some(k), Error::InvalidConfig(m)) => err_at(r.origin(k), m),
            (_, e) => e,
        }
    })?;
    Ok(cfg)
}

fn apply_trajectory(r: &Reader, cfg: &mut ScenarioConfig) -> Result<()> {
    let kind = match r.raw("kind") {
        Some(e) => e.value.clone(),
        None => cfg.trajectory.name().to_string(),
    };
    let own: &[&str] = match kind.as_str() {
        "lissajous" => &["offset", "cos_amp", "sin_amp", "omega"],
        "circle" => &["center", "radius", "omega"],
        "static" => &["position"],
        "constant_velocity" => &["start", "velocity"],
        "samples" => &["samples"],
        other => {
            return Err(err_at(
                r.origin("kind"),
                format!("unknown trajectory kind '{other}' (lissajous, circle, static, constant_velocity, samples)"),
            ))
        }
    };
    for key in ["offset", "cos_amp", "sin_amp", "omega", "center", "radius", "position", "start", "velocity", "samples"] {
        if r.raw(key).is_some() && !own.contains(&key) {
            return Err(err_at(r.origin(key), format!("'{key}' does not apply to a {kind} trajectory")));
        }
    }
    let keep = kind == cfg.trajectory.name();
    let base = if keep { cfg.trajectory.clone() } else { default_trajectory(&kind) };
    let n = match kind.as_str() {
        "lissajous" | "static" | "constant_velocity" => r.list(own[0])?.map_or(base.dim(), |v| v.len()),
        _ => base.dim(),
    };
    let vecn = |key: &str, fallback: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(r.vector(key, n)?.unwrap_or_else(|| fallback.clone()))
    };
    cfg.trajectory = match base {
        Trajectory::Lissajous { offset, cos_amp, sin_amp, omega } => Trajectory::Lissajous {
            offset: vecn("offset", &offset)?,
            cos_amp: vecn("cos_amp", &resize(&cos_amp, n))?,
            sin_amp: vecn("sin_amp", &resize(&sin_amp, n))?,
            omega: vecn("omega", &resize_with(&omega, n, 1.0))?,
        },
        Trajectory::Circle { center, radius, omega } => {
            let omega = match r.list("omega")? {
                Some(v) if v.len() == 1 => v[0],
                Some(_) => return Err(err_at(r.origin("omega"), "a circle takes a single angular rate")),
                None => omega,
            };
            let center = match r.list("center")? {
                Some(v) => DVector::from_vec(v),
                None => center,
            };
            Trajectory::Circle { center, radius: r.real("radius")?.unwrap_or(radius), omega }
        }
        Trajectory::Static { position } => Trajectory::Static {
            position: r.list("position")?.map(DVector::from_vec).unwrap_or(position),
        },
        Trajectory::ConstantVelocity { start, velocity } => {
            let start = r.list("start")?.map(DVector::from_vec).unwrap_or(start);
            let n = start.len();
            Trajectory::ConstantVelocity { velocity: r.vector("velocity", n)?.unwrap_or_else(|| resize(&velocity, n)), start }
        }
        Trajectory::Samples(_) => {
            let rows = r.rows("samples")?.ok_or_else(|| err_at(r.origin("kind"), "a samples trajectory needs 'samples = t x y z; ...'"))?;
            let width = rows[0].len();
            if width < 3 || rows.iter().any(|row| row.len() != width) {
                return Err(err_at(r.origin("samples"), "every sample row must be 't x y [z]' with the same width"));
            }
            let times = rows.iter().map(|row| row[0]).collect();
            let pts = rows.iter().map(|row| DVector::from_column_slice(&row[1..])).collect();
            Trajectory::Samples(SampledPath::new(times, pts).map_err(|e| err_at(r.origin("samples"), e.to_string()))?)
        }
    };
    cfg.trajectory.validate().map_err(|e| err_at(r.origin("kind"), e.to_string()))
}

fn default_trajectory(kind: &str) -> Trajectory {
    match kind {
        "lissajous" => Trajectory::preset_lissajous(),
        "circle" => Trajectory::preset_circle(),
        "constant_velocity" => Trajectory::ConstantVelocity {
            start: DVector::from_column_slice(&[5.0, 0.0, 4.0]),
            velocity: DVector::zeros(3),
        },
        "samples" => Trajectory::Samples(
            SampledPath::new(vec![0.0, 1.0], vec![DVector::zeros(3), DVector::zeros(3)]).expect("two samples"),
        ),
        _ => Trajectory::preset_static(),
    }
}

fn resize(v: &DVector<f64>, n: usize) -> DVector<f64> {
    resize_with(v, n, 0.0)
}

fn resize_with(v: &DVector<f64>, n: usize, fill: f64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| v.get(i).copied().unwrap_or(fill))
}

fn apply_sources(r: &Reader, cfg: &mut ScenarioConfig, n: usize) -> Result<()> {
    let points = match r.rows("points")? {
        Some(rows) => {
            if rows.is_empty() {
                return Err(err_at(r.origin("points"), "at least one source point is required"));
            }
            if let Some(bad) = rows.iter().find(|row| row.len() != n) {
                return Err(err_at(
                    r.origin("points"),
                    format!("source points need {n} coordinates, one has {}", bad.len()),
                ));
            }
            rows.into_iter().map(DVector::from_vec).collect()
        }
        None if cfg.sources.dim() == n => cfg.sources.points().to_vec(),
        None => vec![DVector::zeros(n)],
    };
    cfg.sources = match r.list("alpha")? {
        Some(alpha) => SourceGeometry::new(points, DVector::from_vec(alpha)).map_err(|e| err_at(r.origin("alpha"), e.to_string()))?,
        None => SourceGeometry::uniform(points).map_err(|e| err_at(r.origin("points"), e.to_string()))?,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_scenario_one() {
        assert_eq!(parse_config("").unwrap(), ScenarioConfig::default());
        assert_eq!(parse_config("# only a comment\n\n[run]\n").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn bias_vector() {
        let cfg = parse_config("bias_a = 0.33 0.66 0.99").unwrap();
        assert_eq!(cfg.bias_a, DVector::from_column_slice(&[0.33, 0.66, 0.99]));
        let cfg = parse_config("[trajectory]\nbias_a = 1, 2, 3  # commas work too").unwrap();
        assert_eq!(cfg.bias_a, DVector::from_column_slice(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn alpha_must_sum_to_one() {
        let text = "[observer]\nvariant = range_multi_biased\n[sources]\npoints = 0 0 0; 10 0 0; 0 10 0\nalpha = 0.5 0.5 0.5\n";
        match parse_config(text) {
            Err(Error::ConfigLine { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("sum"), "{msg}");
            }
            other => panic!("expected a line error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("h = 1e-3\nbogus = 1\n", 2),
            ("[run]\nh = abc\n", 2),
            ("[noise]\nh = 0.1\n", 2),
            ("[nothing]\n", 1),
            ("h = 1\nh = 2\n", 2),
            ("variant = sideways\n", 1),
            ("xhat0 = 1 2\n", 1),
            ("just text\n", 1),
        ];
        for (text, want) in cases {
            match parse_config(text) {
                Err(Error::ConfigLine { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: expected a line error, got {other:?}"),
            }
        }
    }

    #[test]
    fn presets_and_overrides() {
        let cfg = parse_config("scenario = 3\nvariant = range_multi_biased\n").unwrap();
        assert_eq!(cfg.sources.len(), 4);
        assert_eq!(cfg.trajectory, Trajectory::preset_static());
        let cfg = parse_config_with_overrides("scenario = 2\n", &["horizon=5".into(), "seed=9".into()]).unwrap();
        assert_eq!((cfg.horizon, cfg.seed), (5.0, 9));
        assert!(parse_config_with_overrides("", &["nope=1".into()]).is_err());
    }

    #[test]
    fn custom_trajectories() {
        let cfg = parse_config("kind = lissajous\nomega = 1 1 2\n").unwrap();
        let Trajectory::Lissajous { omega, offset, .. } = &cfg.trajectory else { panic!() };
        assert_eq!(omega[2], 2.0);
        assert_eq!(offset[0], -15.0);
        let cfg = parse_config("kind = samples\nsamples = 0 0 0 0; 1 1 0 0; 2 2 1 0\n").unwrap();
        assert!((cfg.trajectory.position(1.0)[0] - 1.0).abs() < 1e-12);
        assert!(parse_config("kind = static\nradius = 3\n").is_err());
        let cfg = parse_config("kind = constant_velocity\nstart = 0 0 1\nvelocity = 1 0 0\n").unwrap();
        assert_eq!(cfg.trajectory.position(2.0), DVector::from_column_slice(&[2.0, 0.0, 1.0]));
    }

    #[test]
    fn planar_setup() {
        let text = "kind = circle\ncenter = 0 0\nradius = 5\npoints = 1 1\nbias_a = 0 0\nxhat0 = 1 0\nahat0 = 0 0\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.trajectory.dim(), 2);
        assert_eq!(cfg.sources.dim(), 2);
    }
}
