//! Series records, the benchmark filename grammar, windowing, and patching.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `(Dataset, Sub-domain)` pair identifying a domain.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainLabel {
    pub dataset: String,
    pub subdomain: String,
}

impl DomainLabel {
    pub fn new(dataset: impl Into<String>, subdomain: impl Into<String>) -> Self {
        Self { dataset: dataset.into(), subdomain: subdomain.into() }
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.subdomain)
    }
}

/// Metadata carried by a benchmark file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileMeta {
    pub index: usize,
    pub dataset: String,
    pub id: String,
    pub subdomain: String,
    pub train_len: usize,
    pub first_anomaly: usize,
}

impl FileMeta {
    pub fn domain(&self) -> DomainLabel {
        DomainLabel::new(self.dataset.clone(), self.subdomain.clone())
    }
}

/// Parses `{index}_{Dataset}_id_{id}_{Subdomain}_tr_{n}_1st_{m}.csv`.
pub fn parse_filename(name: &str) -> Result<FileMeta> {
    let fail = |reason: &str| Error::FileName { name: name.to_string(), reason: reason.to_string() };
    let stem = name.strip_suffix(".csv").unwrap_or(name);
    let tokens: Vec<&str> = stem.split('_').collect();
    let tr = tokens.iter().rposition(|t| *t == "tr").ok_or_else(|| fail("missing `tr` marker"))?;
    if tokens.get(tr + 2) != Some(&"1st") || tokens.len() != tr + 4 {
        return Err(fail("missing `1st` marker"));
    }
    let train_len = tokens[tr + 1].parse().map_err(|_| fail("non-numeric train length"))?;
    let first_anomaly = tokens[tr + 3].parse().map_err(|_| fail("non-numeric first-anomaly index"))?;
    if tr < 3 {
        return Err(fail("too few tokens before `tr`"));
    }
    let index = tokens[0].parse().map_err(|_| fail("non-numeric leading index"))?;
    let id_pos = tokens[..tr].iter().position(|t| *t == "id").ok_or_else(|| fail("missing `id` marker"))?;
    if id_pos != 2 || tr < id_pos + 3 {
        return Err(fail("malformed `id` section"));
    }
    Ok(FileMeta {
        index,
        dataset: tokens[1].to_string(),
        id: tokens[id_pos + 1..tr - 1].join("_"),
        subdomain: tokens[tr - 1].to_string(),
        train_len,
        first_anomaly,
    })
}

/// Inverse of [`parse_filename`].
pub fn format_filename(meta: &FileMeta) -> String {
    format!(
        "{:03}_{}_id_{}_{}_tr_{}_1st_{}.csv",
        meta.index, meta.dataset, meta.id, meta.subdomain, meta.train_len, meta.first_anomaly
    )
}

/// A labeled univariate series with its domain and train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRecord {
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub dataset: String,
    pub subdomain: String,
    /// Leading points forming the training split.
    pub train_len: usize,
    /// Leading points actually used for training (`≤ train_len`); lowered by
    /// few-shot subsampling.
    pub train_used: usize,
    pub first_anomaly: usize,
    pub source_file: String,
}

impl SeriesRecord {
    pub fn new(meta: &FileMeta, values: Vec<f64>, labels: Vec<u8>, source_file: impl Into<String>) -> Result<Self> {
        let source_file = source_file.into();
        if values.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{source_file}: {} values but {} labels",
                values.len(),
                labels.len()
            )));
        }
        if meta.train_len == 0 || meta.train_len >= values.len() {
            return Err(Error::InvalidArgument(format!(
                "{source_file}: train length {} outside (0, {})",
                meta.train_len,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("{source_file}: non-finite value at index {i}")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!("{source_file}: non-binary label at index {i}")));
        }
        Ok(Self {
            values,
            labels,
            dataset: meta.dataset.clone(),
            subdomain: meta.subdomain.clone(),
            train_len: meta.train_len,
            train_used: meta.train_len,
            first_anomaly: meta.first_anomaly,
            source_file,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn domain(&self) -> DomainLabel {
        DomainLabel::new(self.dataset.clone(), self.subdomain.clone())
    }

    /// File stem used as the series identifier in reports.
    pub fn series_id(&self) -> &str {
        let base = self.source_file.rsplit(['/', '\\']).next().unwrap_or(&self.source_file);
        base.strip_suffix(".csv").unwrap_or(base)
    }

    pub fn train_values(&self) -> &[f64] {
        &self.values[..self.train_used]
    }

    pub fn test_values(&self) -> &[f64] {
        &self.values[self.train_len..]
    }

    pub fn test_labels(&self) -> &[u8] {
        &self.labels[self.train_len..]
    }
}

/// Non-overlapping windows `[0, win), [win, 2win), …` over a series of
/// length `len`. A trailing short window is kept when it holds at least
/// one patch of `patch_len` points.
pub fn window_series(len: usize, win: usize, patch_len: usize) -> Vec<Range<usize>> {
    if win == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + win).min(len);
        if end - start >= patch_len.max(1) {
            out.push(start..end);
        }
        start = end;
    }
    out
}

/// Mean and standard deviation used to standardize a window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Per-window z-score `(x − mean) / max(std, eps)` (population std).
pub fn standardize(window: &[f64], eps: f64) -> (Vec<f64>, NormStats) {
    let n = window.len().max(1) as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm_sqrt(var);
    let denom = std.max(eps);
    (window.iter().map(|v| (v - mean) / denom).collect(), NormStats { mean, std })
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

/// One window split into observed patches, zero-padded to `N` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedWindow {
    /// `N × L`; rows `P..N` are zero.
    pub patches: Matrix<f64>,
    /// Length `N`; `true` for the leading `P` observed patches.
    pub mask: Vec<bool>,
    pub series: usize,
    pub start: usize,
    pub norm: NormStats,
}

impl PatchedWindow {
    /// Number of observed patches.
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.cols()
    }

    /// `P × L` observed rows.
    pub fn observed_patches(&self) -> Matrix<f64> {
        self.patches.slice_rows(0, self.observed()).expect("observed rows are in range")
    }

    /// Concatenation of observed patches, i.e. the first `P·L` points.
    pub fn unpatchify(&self) -> Vec<f64> {
        self.observed_patches().into_data()
    }

    /// Number of timesteps covered by observed patches.
    pub fn covered(&self) -> usize {
        self.observed() * self.patch_len()
    }
}

/// Splits `window` into `floor(len / L)` patches, dropping the remainder,
/// and zero-pads to `n_max` rows.
pub fn patchify(window: &[f64], patch_len: usize, n_max: usize) -> Result<PatchedWindow> {
    if patch_len == 0 {
        return Err(Error::InvalidArgument("patch length must be positive".into()));
    }
    if window.len() < patch_len {
        return Err(Error::InvalidArgument(format!(
            "window of {} points is shorter than one patch ({patch_len})",
            window.len()
        )));
    }
    if window.len() > n_max * patch_len {
        return Err(Error::InvalidArgument(format!(
            "window of {} points exceeds {n_max} patches of {patch_len}",
            window.len()
        )));
    }
    let p = window.len() / patch_len;
    let mut patches = Matrix::zeros(n_max, patch_len);
    patches.data_mut()[..p * patch_len].copy_from_slice(&window[..p * patch_len]);
    let mask = (0..n_max).map(|i| i < p).collect();
    Ok(PatchedWindow { patches, mask, series: 0, start: 0, norm: NormStats { mean: 0.0, std: 1.0 } })
}

/// Dense ids for the distinct domain labels of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainIndex {
    labels: Vec<DomainLabel>,
}

impl DomainIndex {
    pub fn from_labels(labels: Vec<DomainLabel>) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::InvalidArgument(format!("duplicate domain label {l}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[DomainLabel] {
        &self.labels
    }

    pub fn id_of(&self, label: &DomainLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, id: usize) -> Option<&DomainLabel> {
        self.labels.get(id)
    }
}

/// Distinct labels in first-appearance order.
pub fn build_domain_index(records: &[SeriesRecord]) -> DomainIndex {
    let mut labels: Vec<DomainLabel> = Vec::new();
    for r in records {
        let l = r.domain();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    DomainIndex { labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn parses_reference_filename() {
        let m = parse_filename("001_NAB_id_1_Facility_tr_1007_1st_2014.csv").unwrap();
        assert_eq!((m.dataset.as_str(), m.subdomain.as_str(), m.train_len, m.first_anomaly), ("NAB", "Facility", 1007, 2014));
        assert_eq!(m.index, 1);
        let m = parse_filename("007_UCR_id_3_Medical_tr_500_1st_812.csv").unwrap();
        assert_eq!((m.dataset.as_str(), m.subdomain.as_str(), m.train_len, m.first_anomaly), ("UCR", "Medical", 500, 812));
    }

    #[test]
    fn rejects_malformed_filenames() {
        for bad in [
            "badname.csv",
            "001_NAB_id_1_Facility_tr_x_1st_2014.csv",
            "001_NAB_id_1_Facility_tr_1007_2014.csv",
            "001_NAB_id_1_Facility_1007_1st_2014.csv",
            "001_NAB_id_1_Facility_tr_1007_1st_.csv",
        ] {
            match parse_filename(bad) {
                Err(Error::FileName { name, .. }) => assert_eq!(name, bad),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn windowing_examples() {
        assert_eq!(window_series(1024, 512, 8), vec![0..512, 512..1024]);
        assert_eq!(window_series(1030, 512, 8), vec![0..512, 512..1024]);
        assert_eq!(window_series(1030, 512, 4), vec![0..512, 512..1024, 1024..1030]);
        assert_eq!(window_series(300, 512, 8), vec![0..300]);
    }

    #[test]
    fn standardize_examples() {
        let (z, s) = standardize(&[5.0; 10], STANDARDIZE_EPS);
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(s.std, 0.0);
        let (z, s) = standardize(&[0.0, 2.0], STANDARDIZE_EPS);
        assert_eq!(z, vec![-1.0, 1.0]);
        assert_eq!((s.mean, s.std), (1.0, 1.0));
    }

    #[test]
    fn patchify_examples() {
        let full: Vec<f64> = (0..512).map(|i| i as f64).collect();
        let w = patchify(&full, 8, 64).unwrap();
        assert_eq!(w.observed(), 64);
        assert!(w.mask.iter().all(|&m| m));

        let short: Vec<f64> = (0..300).map(|i| i as f64 + 1.0).collect();
        let w = patchify(&short, 8, 64).unwrap();
        assert_eq!(w.observed(), 37);
        assert!(w.mask[..37].iter().all(|&m| m) && w.mask[37..].iter().all(|&m| !m));
        assert!(w.patches.data()[37 * 8..].iter().all(|&v| v == 0.0));
        assert_eq!(w.unpatchify(), short[..296].to_vec());

        assert_eq!(patchify(&[1.0; 8], 8, 64).unwrap().observed(), 1);
        assert!(patchify(&[1.0; 513], 8, 64).is_err());
        assert!(patchify(&[1.0; 7], 8, 64).is_err());
    }

    #[test]
    fn domain_index_first_appearance() {
        let meta = |d: &str, s: &str| FileMeta {
            index: 1,
            dataset: d.into(),
            id: "1".into(),
            subdomain: s.into(),
            train_len: 1,
            first_anomaly: 1,
        };
        let rec = |d, s| SeriesRecord::new(&meta(d, s), vec![0.0; 4], vec![0; 4], "x.csv").unwrap();
        assert_eq!(build_domain_index(&[rec("NAB", "Facility"), rec("NAB", "Facility")]).len(), 1);
        let idx = build_domain_index(&[rec("UCR", "Medical"), rec("NAB", "Facility"), rec("UCR", "Medical")]);
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.id_of(&DomainLabel::new("UCR", "Medical")), Some(0));
        assert_eq!(idx.id_of(&DomainLabel::new("NAB", "Facility")), Some(1));
        let many: Vec<_> = (0..32).map(|i| rec("D", if i % 2 == 0 { "a" } else { "b" })).collect();
        assert_eq!(build_domain_index(&many).len(), 2);
    }

    #[test]
    fn record_validation() {
        let meta = parse_filename("001_NAB_id_1_Facility_tr_2_1st_3.csv").unwrap();
        assert!(SeriesRecord::new(&meta, vec![0.0; 4], vec![0; 3], "f").is_err());
        assert!(SeriesRecord::new(&meta, vec![0.0; 2], vec![0; 2], "f").is_err());
        assert!(SeriesRecord::new(&meta, vec![0.0, f64::NAN, 0.0], vec![0; 3], "f").is_err());
        assert!(SeriesRecord::new(&meta, vec![0.0; 3], vec![0, 2, 0], "f").is_err());
        let r = SeriesRecord::new(&meta, vec![0.0; 4], vec![0; 4], "dir/001_NAB_id_1_Facility_tr_2_1st_3.csv").unwrap();
        assert_eq!(r.series_id(), "001_NAB_id_1_Facility_tr_2_1st_3");
    }

    proptest! {
        #[test]
        fn filename_round_trip(index in 0usize..1000, ds in "[A-Z][A-Za-z0-9]{0,8}", id in "[0-9]{1,3}",
                               sub in "[A-Z][A-Za-z0-9]{0,8}", n in 1usize..100000, m in 0usize..100000) {
            let meta = FileMeta { index, dataset: ds, id, subdomain: sub, train_len: n, first_anomaly: m };
            prop_assert_eq!(parse_filename(&format_filename(&meta)).unwrap(), meta);
        }

        #[test]
        fn windows_tile_without_overlap(len in 0usize..5000, k in 1usize..80, l in 1usize..16) {
            let win = k * l;
            let ws = window_series(len, win, l);
            let mut next = 0;
            for w in &ws {
                prop_assert_eq!(w.start, next);
                prop_assert!(w.end - w.start <= win && w.end - w.start >= l);
                next = w.end;
            }
            let covered: usize = ws.iter().map(|w| (w.end - w.start) / l * l).sum();
            prop_assert!(len - covered < l + win);
        }

        #[test]
        fn standardize_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..64)) {
            let (a, _) = standardize(&v, STANDARDIZE_EPS);
            let (b, _) = standardize(&a, STANDARDIZE_EPS);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn unpatchify_restores_prefix(v in prop::collection::vec(-10.0f64..10.0, 8..512)) {
            let w = patchify(&v, 8, 64).unwrap();
            let p = v.len() / 8;
            prop_assert_eq!(w.unpatchify(), v[..p * 8].to_vec());
        }
    }
}
