//! Dataset files and comma-separated result tables.
//!
//! Dataset format, one header line then one line per sample:
//!
//! ```text
//! flowdirect-dataset v1 dim=<D> reward="<description>"
//! <iter> <reward> <x_1> ... <x_D>
//! ```
//!
//! Numbers are written with 17 significant digits so a load reproduces every
//! stored value exactly. Reward normalization is never stored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::guidance::{Dataset, LabeledSample};
use crate::optimizer::IterationMetrics;
use crate::point::{format_f64, Point};

pub const FORMAT_TAG: &str = "flowdirect-dataset";
pub const VERSION: &str = "v1";

/// Datasets read back from a file, grouped by iteration in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDatasets {
    pub dim: usize,
    pub reward: String,
    pub datasets: Vec<Dataset>,
}

impl LoadedDatasets {
    /// Union of all iterations.
    pub fn merged(&self) -> Result<Dataset> {
        Dataset::merged(&self.datasets)
    }
}

/// Writes `contents` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FlowError::Io(e.error))?;
    Ok(())
}

fn escape(desc: &str) -> String {
    desc.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

pub fn render_datasets(datasets: &[Dataset], reward: &str) -> Result<String> {
    let dim = datasets.first().map(Dataset::dim).ok_or(FlowError::Empty("dataset collection"))?;
    for ds in datasets {
        if ds.dim() != dim {
            return Err(FlowError::DimensionMismatch {
                expected: dim,
                got: ds.dim(),
            });
        }
    }
    let mut out = format!("{FORMAT_TAG} {VERSION} dim={dim} reward=\"{}\"\n", escape(reward));
    for s in datasets.iter().flat_map(|d| d.samples()) {
        write!(out, "{} {}", s.iter, format_f64(s.reward)).expect("write to String");
        for c in &s.x1 {
            write!(out, " {}", format_f64(*c)).expect("write to String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Saves the collection atomically; nothing is written if validation fails.
pub fn save_dataset(datasets: &[Dataset], reward: &str, path: &Path) -> Result<()> {
    let text = render_datasets(datasets, reward)?;
    write_atomic(path, text.as_bytes())
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, String)> {
    let bad = |reason: String| FlowError::Format {
        path: path.to_path_buf(),
        line: 1,
        reason,
    };
    let rest = line
        .strip_prefix(FORMAT_TAG)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("missing `{FORMAT_TAG}` tag")))?;
    let (version, rest) = rest.split_once(' ').ok_or_else(|| bad("truncated header".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version `{version}`")));
    }
    let (dim_field, rest) = rest.split_once(' ').ok_or_else(|| bad("truncated header".into()))?;
    let dim: usize = dim_field
        .strip_prefix("dim=")
        .and_then(|d| d.parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| bad(format!("bad dimension field `{dim_field}`")))?;
    let reward = rest
        .strip_prefix("reward=\"")
        .and_then(|r| r.strip_suffix('"'))
        .ok_or_else(|| bad("bad reward field".into()))?;
    Ok((dim, unescape(reward)))
}

pub fn parse_datasets(path: &Path, text: &str) -> Result<LoadedDatasets> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FlowError::Format {
        path: path.to_path_buf(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let (dim, reward) = parse_header(path, header)?;
    let mut groups: BTreeMap<usize, Vec<LabeledSample>> = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| FlowError::Format {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != dim + 2 {
            return Err(bad(format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let iter: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad iteration `{}`", fields[0])))?;
        let mut values = Vec::with_capacity(dim + 1);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| bad(format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value `{f}`")));
            }
            values.push(v);
        }
        let reward = values[0];
        let x1: Point = values[1..].to_vec();
        groups.entry(iter).or_default().push(LabeledSample { x1, reward, iter });
    }
    if groups.is_empty() {
        return Err(FlowError::Format {
            path: path.to_path_buf(),
            line: 2,
            reason: "no samples".into(),
        });
    }
    let datasets = groups
        .into_values()
        .map(|samples| Dataset::new(dim, samples))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDatasets { dim, reward, datasets })
}

pub fn load_dataset(path: &Path) -> Result<LoadedDatasets> {
    let text = std::fs::read_to_string(path)?;
    parse_datasets(path, &text)
}

/// `iter,evals,mean_reward,best_reward,mean_coord_1..D`
pub fn render_metrics(metrics: &[IterationMetrics], dim: usize) -> String {
    let mut out = String::from("iter,evals,mean_reward,best_reward");
    for d in 1..=dim {
        write!(out, ",mean_coord_{d}").expect("write to String");
    }
    out.push('\n');
    for m in metrics {
        write!(
            out,
            "{},{},{},{}",
            m.iter,
            m.evaluations,
            format_f64(m.mean_reward),
            format_f64(m.best_reward)
        )
        .expect("write to String");
        for c in &m.mean_coords {
            write!(out, ",{}", format_f64(*c)).expect("write to String");
        }
        out.push('\n');
    }
    out
}

pub fn render_samples(samples: &[Point]) -> String {
    let dim = samples.first().map_or(0, Vec::len);
    let mut out = (1..=dim).map(|d| format!("x_{d}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for s in samples {
        out.push_str(&s.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_sets() -> Vec<Dataset> {
        vec![
            Dataset::from_points(vec![vec![0.1, -2.0], vec![1e6, -1e-300]], &[0.5, -3.25], 0).unwrap(),
            Dataset::from_points(vec![vec![std::f64::consts::PI, 0.0]], &[1.0 / 3.0], 1).unwrap(),
        ]
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let sets = sample_sets();
        save_dataset(&sets, "linear:1,0", &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_dataset(&sets, "linear:1,0", &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.dim, 2);
        assert_eq!(loaded.reward, "linear:1,0");
        assert_eq!(loaded.datasets, sets);
        let header = String::from_utf8(first).unwrap();
        assert!(header.starts_with("flowdirect-dataset v1 dim=2 reward=\"linear:1,0\"\n0 "));
    }

    #[test]
    fn dimension_mismatch_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let mixed = vec![
            Dataset::from_points(vec![vec![0.0]], &[0.0], 0).unwrap(),
            Dataset::from_points(vec![vec![0.0, 1.0]], &[0.0], 1).unwrap(),
        ];
        assert!(save_dataset(&mixed, "x", &path).is_err());
        assert!(!path.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rejects_bad_files_with_line_numbers() {
        let p = Path::new("mem");
        let nan = "flowdirect-dataset v1 dim=1 reward=\"r\"\n0 1.0 2.0\n0 NaN 1.0\n";
        match parse_datasets(p, nan) {
            Err(FlowError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let short = "flowdirect-dataset v1 dim=2 reward=\"r\"\n0 1.0 2.0\n";
        assert!(matches!(parse_datasets(p, short), Err(FlowError::Format { line: 2, .. })));
        let version = "flowdirect-dataset v9 dim=1 reward=\"r\"\n0 1.0 2.0\n";
        assert!(matches!(parse_datasets(p, version), Err(FlowError::Format { line: 1, .. })));
    }

    #[test]
    fn quoted_descriptions_survive() {
        let p = Path::new("mem");
        let sets = sample_sets();
        let text = render_datasets(&sets, "cmd:echo \"hi\" \\ there").unwrap();
        assert_eq!(parse_datasets(p, &text).unwrap().reward, "cmd:echo \"hi\" \\ there");
    }

    #[test]
    fn metrics_table_schema() {
        let m = IterationMetrics {
            iter: 0,
            evaluations: 16,
            mean_reward: 0.5,
            best_reward: 2.0,
            best_so_far: 2.0,
            mean_coords: vec![0.25, -1.0],
        };
        let text = render_metrics(&[m], 2);
        assert!(text.starts_with("iter,evals,mean_reward,best_reward,mean_coord_1,mean_coord_2\n0,16,"));
    }

    proptest! {
        #[test]
        fn round_trip_extreme_values(
            rows in prop::collection::vec((0usize..5, -1e6..1e6f64, prop::collection::vec(-1e6..1e6f64, 3)), 1..20)
        ) {
            let samples: Vec<LabeledSample> = rows
                .into_iter()
                .map(|(iter, reward, x1)| LabeledSample { x1, reward, iter })
                .collect();
            let mut sorted = samples.clone();
            sorted.sort_by_key(|s| s.iter);
            let ds = Dataset::new(3, samples).unwrap();
            let text = render_datasets(std::slice::from_ref(&ds), "r").unwrap();
            let loaded = parse_datasets(Path::new("mem"), &text).unwrap();
            let flat: Vec<LabeledSample> = loaded.datasets.iter().flat_map(|d| d.samples().to_vec()).collect();
            prop_assert_eq!(flat, sorted);
        }
    }
}
