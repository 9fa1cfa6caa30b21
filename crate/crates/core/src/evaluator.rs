//! Accuracy on clean and shifted suites, mean corruption error and the
//! multi-suite robustness report.
//!
//! # Suite manifest
//!
//! ```text
//! # name  = source
//! suite clean    = clean
//! suite fog3     = corrupt fog 3
//! suite outside  = dataset data/extra test
//! avg fog3 outside          # columns averaged into `avg` (default: every suite)
//! mce fog 1                 # (kind, severity) cells of the mCE grid
//! mce fog 3
//! seed = 0                  # corruption seed
//! ```
//!
//! `clean` and `corrupt` suites are derived from the evaluation set passed to
//! [`SuiteManifest::resolve`]; `dataset` suites are loaded from disk.
//!
//! # Report CSV
//!
//! Header `model,<suite>...,avg,mce`. Accuracies and `avg` are percentages;
//! `mce` is a percentage relative to the baseline model and is left empty
//! when it is undefined.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{batch_tensor, corrupt_dataset, load_dataset, CorruptionKind, Dataset};
use crate::error::{Error, Result};
use crate::model::{predict, Classifier};

const EVAL_CHUNK: usize = 256;

/// Number of correctly classified examples.
pub fn correct_count<C: Classifier + ?Sized>(model: &C, ds: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for chunk in ds.examples.chunks(EVAL_CHUNK) {
        let x = batch_tensor(chunk.iter().map(|e| &e.image))?;
        let pred = predict(model, &x)?;
        correct += pred.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(correct)
}

/// Top-1 accuracy in percent.
pub fn top1<C: Classifier + ?Sized>(model: &C, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("top-1 accuracy of an empty dataset".into()));
    }
    Ok(100.0 * correct_count(model, ds)? as f64 / ds.len() as f64)
}

/// Error rates over a `(kind, severity)` grid, as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub cells: BTreeMap<(CorruptionKind, u8), f64>,
}

impl ErrorTable {
    pub fn measure<C: Classifier + ?Sized>(
        model: &C,
        base: &Dataset,
        grid: &[(CorruptionKind, u8)],
        seed: u64,
    ) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Empty("corruption error of an empty dataset".into()));
        }
        let mut cells = BTreeMap::new();
        for &(kind, sev) in grid {
            let ds = corrupt_dataset(base, kind, sev, seed)?;
            let wrong = ds.len() - correct_count(model, &ds)?;
            cells.insert((kind, sev), wrong as f64 / ds.len() as f64);
        }
        Ok(Self { cells })
    }

    fn kinds(&self) -> Vec<CorruptionKind> {
        let mut k: Vec<_> = self.cells.keys().map(|(k, _)| *k).collect();
        k.dedup();
        k
    }

    fn kind_total(&self, kind: CorruptionKind) -> f64 {
        self.cells.iter().filter(|((k, _), _)| *k == kind).map(|(_, e)| e).sum()
    }
}

/// Per-kind corruption errors normalized by the baseline, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Mce {
    /// `None` where the baseline makes no errors on that kind.
    pub per_kind: Vec<(CorruptionKind, Option<f64>)>,
}

impl Mce {
    /// Mean over the kinds where the ratio is defined.
    pub fn value(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_kind.iter().filter_map(|(_, v)| *v).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

pub fn mce_from_tables(model: &ErrorTable, baseline: &ErrorTable) -> Result<Mce> {
    if model.cells.keys().ne(baseline.cells.keys()) {
        return Err(Error::InvalidArgument("model and baseline were evaluated on different grids".into()));
    }
    let per_kind = model
        .kinds()
        .into_iter()
        .map(|k| {
            let b = baseline.kind_total(k);
            (k, (b > 0.0).then(|| model.kind_total(k) / b * 100.0))
        })
        .collect();
    Ok(Mce { per_kind })
}

pub fn mce<C: Classifier + ?Sized, B: Classifier + ?Sized>(
    model: &C,
    base: &Dataset,
    grid: &[(CorruptionKind, u8)],
    baseline: &B,
    seed: u64,
) -> Result<Mce> {
    let m = ErrorTable::measure(model, base, grid, seed)?;
    let b = ErrorTable::measure(baseline, base, grid, seed)?;
    mce_from_tables(&m, &b)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SuiteSource {
    Clean,
    Corrupt(CorruptionKind, u8),
    Dataset { root: PathBuf, split: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteManifest {
    pub suites: Vec<(String, SuiteSource)>,
    /// Suites entering the average column; empty means all of them.
    pub average: Vec<String>,
    pub mce_grid: Vec<(CorruptionKind, u8)>,
    pub seed: u64,
}

impl SuiteManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SuiteManifest { suites: vec![], average: vec![], mce_grid: vec![], seed: 0 };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("suite manifest line {}: {msg}", n + 1));
            let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match head {
                "suite" => {
                    let (name, src) = rest.split_once('=').ok_or_else(|| bad("expected `suite <name> = <source>`"))?;
                    let name = name.trim();
                    if name.is_empty() || name.contains(',') || name == "model" || name == "avg" || name == "mce" {
                        return Err(bad(&format!("invalid suite name `{name}`")));
                    }
                    if m.suites.iter().any(|(s, _)| s == name) {
                        return Err(bad(&format!("duplicate suite `{name}`")));
                    }
                    let f: Vec<&str> = src.split_whitespace().collect();
                    let source = match f.as_slice() {
                        ["clean"] => SuiteSource::Clean,
                        ["corrupt", kind, sev] => {
                            let kind: CorruptionKind = kind.parse()?;
                            let sev: u8 = sev.parse().map_err(|_| bad("bad severity"))?;
                            kind.parameter(sev)?;
                            SuiteSource::Corrupt(kind, sev)
                        }
                        ["dataset", root, split] => {
                            SuiteSource::Dataset { root: PathBuf::from(root), split: split.to_string() }
                        }
                        _ => return Err(bad("source must be `clean`, `corrupt <kind> <severity>` or `dataset <root> <split>`")),
                    };
                    m.suites.push((name.to_string(), source));
                }
                "avg" => m.average.extend(rest.split_whitespace().map(String::from)),
                "mce" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [kind, sev] = f.as_slice() else { return Err(bad("expected `mce <kind> <severity>`")) };
                    let kind: CorruptionKind = kind.parse()?;
                    let sev: u8 = sev.parse().map_err(|_| bad("bad severity"))?;
                    kind.parameter(sev)?;
                    m.mce_grid.push((kind, sev));
                }
                _ if line.starts_with("seed") => {
                    let v = line.split_once('=').ok_or_else(|| bad("expected `seed = <n>`"))?.1.trim();
                    m.seed = v.parse().map_err(|_| bad("bad seed"))?;
                }
                other => return Err(bad(&format!("unknown directive `{other}`"))),
            }
        }
        if m.suites.is_empty() {
            return Err(Error::Config("suite manifest defines no suites".into()));
        }
        for a in &m.average {
            if !m.suites.iter().any(|(s, _)| s == a) {
                return Err(Error::Config(format!("average references unknown suite `{a}`")));
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingPath(path.to_path_buf()))?;
        let mut m = Self::parse(&text)?;
        // dataset roots are relative to the manifest
        let dir = path.parent().unwrap_or(Path::new(""));
        for (_, s) in &mut m.suites {
            if let SuiteSource::Dataset { root, .. } = s {
                if root.is_relative() {
                    *root = dir.join(&*root);
                }
            }
        }
        Ok(m)
    }

    pub fn average_columns(&self) -> Vec<String> {
        if self.average.is_empty() {
            self.suites.iter().map(|(s, _)| s.clone()).collect()
        } else {
            self.average.clone()
        }
    }

    /// Materializes every suite from the clean evaluation set.
    pub fn resolve(&self, clean: &Dataset) -> Result<Vec<(String, Dataset)>> {
        self.suites
            .iter()
            .map(|(name, src)| {
                let ds = match src {
                    SuiteSource::Clean => clean.clone(),
                    SuiteSource::Corrupt(k, s) => {
                        corrupt_dataset(clean, *k, *s, self.seed)?
                    }
                    SuiteSource::Dataset { root, split } => load_dataset(root, split)?,
                };
                Ok((name.clone(), ds))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub model: String,
    /// Per-suite top-1 accuracy in manifest order.
    pub accuracy: Vec<(String, f64)>,
    pub average_columns: Vec<String>,
    pub average: f64,
    pub mce: Option<Mce>,
}

impl RobustnessReport {
    pub fn mce_value(&self) -> Option<f64> {
        self.mce.as_ref().and_then(Mce::value)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("model");
        for (s, _) in &self.accuracy {
            h.push(',');
            h.push_str(s);
        }
        h.push_str(",avg,mce");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = self.model.replace(',', "_");
        for (_, a) in &self.accuracy {
            write!(r, ",{a}").unwrap();
        }
        write!(r, ",{}", self.average).unwrap();
        r.push(',');
        if let Some(v) = self.mce_value() {
            write!(r, "{v}").unwrap();
        }
        r
    }
}

/// Evaluates one model on every suite and, when the manifest has an mCE grid,
/// against the baseline.
pub fn report<C, B>(
    name: &str,
    model: &C,
    manifest: &SuiteManifest,
    suites: &[(String, Dataset)],
    clean: &Dataset,
    baseline: Option<&B>,
) -> Result<RobustnessReport>
where
    C: Classifier + Sync + ?Sized,
    B: Classifier + Sync + ?Sized,
{
    let accuracy = std::thread::scope(|s| {
        let handles: Vec<_> = suites
            .iter()
            .map(|(n, ds)| s.spawn(move || top1(model, ds).map(|a| (n.clone(), a))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect::<Result<Vec<_>>>()
    })?;
    let average_columns = manifest.average_columns();
    let mut sum = 0.0;
    for c in &average_columns {
        sum += accuracy
            .iter()
            .find(|(n, _)| n == c)
            .ok_or_else(|| Error::Config(format!("no suite named `{c}`")))?
            .1;
    }
    let average = sum / average_columns.len() as f64;
    let mce = match (manifest.mce_grid.is_empty(), baseline) {
        (true, _) => None,
        (false, Some(b)) => Some(mce(model, clean, &manifest.mce_grid, b, manifest.seed)?),
        (false, None) => return Err(Error::InvalidArgument("mCE grid requires a baseline model".into())),
    };
    Ok(RobustnessReport { model: name.to_string(), accuracy, average_columns, average, mce })
}

/// Renders reports sharing one column layout.
pub fn reports_csv(reports: &[RobustnessReport]) -> Result<String> {
    let Some(first) = reports.first() else { return Ok(String::new()) };
    let header = first.csv_header();
    let mut out = format!("{header}\n");
    for r in reports {
        if r.csv_header() != header {
            return Err(Error::InvalidArgument(format!("report for `{}` has a different column layout", r.model)));
        }
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    Ok(out)
}

/// A report row read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub accuracy: Vec<(String, f64)>,
    pub average: f64,
    pub mce: Option<f64>,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty report".into()))?.split(',').collect();
    let n = header.len();
    if n < 3 || header[0] != "model" || header[n - 2] != "avg" || header[n - 1] != "mce" {
        return Err(Error::Format("report header must be `model,<suites>,avg,mce`".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != n {
                return Err(Error::Format(format!("row has {} fields, header has {n}", f.len())));
            }
            Ok(ReportRow {
                model: f[0].to_string(),
                accuracy: (1..n - 2).map(|i| Ok((header[i].to_string(), num(f[i])?))).collect::<Result<_>>()?,
                average: num(f[n - 2])?,
                mce: if f[n - 1].is_empty() { None } else { Some(num(f[n - 1])?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image, LabeledExample};
    use crate::tensor::Tensor;

    /// Predicts a fixed class, or the label encoded in the first pixel.
    struct Fixed(Option<usize>);

    impl Classifier for Fixed {
        fn input_shape(&self) -> [usize; 3] {
            [1, 1, 1]
        }
        fn num_classes(&self) -> usize {
            10
        }
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            let n = images.batch();
            let mut out = Tensor::zeros(vec![n, 10]);
            for i in 0..n {
                let c = self.0.unwrap_or_else(|| (images.sample(i)[0] * 10.0).round() as usize);
                out.sample_mut(i)[c] = 1.0;
            }
            Ok(out)
        }
        fn input_grad(&self, _: &Tensor, _: &Tensor) -> Result<Tensor> {
            unimplemented!()
        }
    }

    fn balanced(per_class: usize) -> Dataset {
        let examples = (0..10 * per_class)
            .map(|i| {
                let label = i % 10;
                let img = Image::new(1, 1, 1, vec![label as f32 / 10.0]).unwrap();
                LabeledExample { image: img, label, id: i as u64 }
            })
            .collect();
        Dataset::new((0..10).map(|c| c.to_string()).collect(), examples).unwrap()
    }

    #[test]
    fn top1_trivial_cases() {
        let ds = balanced(7);
        assert_eq!(top1(&Fixed(Some(3)), &ds).unwrap(), 10.0);
        assert_eq!(top1(&Fixed(None), &ds).unwrap(), 100.0);
        let empty = Dataset::new(ds.class_names.clone(), vec![]).unwrap();
        assert!(top1(&Fixed(None), &empty).is_err());
    }

    fn table(cells: &[((CorruptionKind, u8), f64)]) -> ErrorTable {
        ErrorTable { cells: cells.iter().copied().collect() }
    }

    #[test]
    fn mce_hand_arithmetic() {
        use CorruptionKind::*;
        let m = table(&[((Fog, 1), 0.2), ((Blur, 1), 0.4)]);
        let b = table(&[((Fog, 1), 0.4), ((Blur, 1), 0.4)]);
        assert_eq!(mce_from_tables(&m, &b).unwrap().value(), Some(75.0));
        assert_eq!(mce_from_tables(&b, &b).unwrap().value(), Some(100.0));
        let perfect = table(&[((Fog, 1), 0.0), ((Blur, 1), 0.0)]);
        assert_eq!(mce_from_tables(&perfect, &b).unwrap().value(), Some(0.0));
        // baseline without errors on one kind
        let z = table(&[((Fog, 1), 0.0), ((Blur, 1), 0.4)]);
        let r = mce_from_tables(&m, &z).unwrap();
        assert_eq!(r.per_kind[0], (Blur, Some(100.0)));
        assert_eq!(r.per_kind[1], (Fog, None));
        assert_eq!(mce_from_tables(&m, &perfect).unwrap().value(), None);
        assert!(mce_from_tables(&m, &table(&[((Fog, 1), 0.1)])).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = SuiteManifest::parse(
            "suite clean = clean\nsuite f = corrupt fog 3 # x\nsuite d = dataset some/where test\navg f d\nmce fog 1\nseed = 4\n",
        )
        .unwrap();
        assert_eq!(m.suites.len(), 3);
        assert_eq!(m.suites[1].1, SuiteSource::Corrupt(CorruptionKind::Fog, 3));
        assert_eq!(m.average_columns(), vec!["f", "d"]);
        assert_eq!(m.mce_grid, vec![(CorruptionKind::Fog, 1)]);
        assert_eq!(m.seed, 4);
        for bad in ["", "suite a = corrupt fog 9", "suite a = nothing", "suite a = clean\navg b", "frobnicate", "suite a,b = clean"] {
            assert!(SuiteManifest::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn report_average_and_schema() {
        let ds = balanced(3);
        let m = SuiteManifest::parse("suite only = clean").unwrap();
        let suites = m.resolve(&ds).unwrap();
        let r = report("a", &Fixed(Some(1)), &m, &suites, &ds, None::<&Fixed>).unwrap();
        assert_eq!(r.average, r.accuracy[0].1);

        let m = SuiteManifest::parse("suite c = clean\nsuite p = corrupt pixelate 5\nmce contrast 1\nmce fog 2").unwrap();
        let suites = m.resolve(&ds).unwrap();
        let a = report("a", &Fixed(None), &m, &suites, &ds, Some(&Fixed(Some(2)))).unwrap();
        let b = report("b", &Fixed(Some(2)), &m, &suites, &ds, Some(&Fixed(Some(2)))).unwrap();
        assert_eq!(b.mce_value(), Some(100.0));
        let csv = reports_csv(&[a.clone(), b]).unwrap();
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows[0].accuracy.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["c", "p"]);
        for row in &rows {
            let avg = row.accuracy.iter().map(|(_, v)| v).sum::<f64>() / 2.0;
            assert!((avg - row.average).abs() < 1e-9);
        }
        assert_eq!(rows[0].mce, a.mce_value());
        assert!(report("a", &Fixed(None), &m, &suites, &ds, None::<&Fixed>).is_err());
    }
}
