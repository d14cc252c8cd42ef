//! Row-stacked feature vectors with labels, and their CSV form.
//!
//! CSV header is `id,label,` followed by the registry names; values are
//! printed in scientific notation with 17 significant digits so they parse
//! back bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{extract_with_lens, tagged_registry};
use crate::io::read_trace_file;
use crate::lens::Lens;
use crate::trace::{DatasetManifest, Label, ModelHead, TraceDims};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            rows: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, label: Label, row: Vec<f64>) -> Result<()> {
        if row.len() != self.names.len() {
            return Err(Error::Shape(format!(
                "row {id} has {} values, expected {}",
                row.len(),
                self.names.len()
            )));
        }
        self.ids.push(id);
        self.labels.push(label);
        self.rows.push(row);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows with the given labels, in order.
    pub fn filter_labels(&self, keep: &[Label]) -> FeatureMatrix {
        let mut out = FeatureMatrix::new(self.names.clone());
        for i in 0..self.n_rows() {
            if keep.contains(&self.labels[i]) {
                out.ids.push(self.ids[i].clone());
                out.labels.push(self.labels[i]);
                out.rows.push(self.rows[i].clone());
            }
        }
        out
    }

    /// Keeps only the named columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            names: columns.iter().map(|&c| self.names[c].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| columns.iter().map(|&c| r[c]).collect())
                .collect(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    /// Column `name`, if present.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.names.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn write_csv<W: Write>(&self, dest: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(dest);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].to_string()];
            rec.extend(self.rows[i].iter().map(|v| format!("{v:.16e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .map_err(Error::from)
            .and_then(|f| self.write_csv(std::io::BufWriter::new(f)))
            .map_err(|e| e.in_file(path))
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(source);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
            return Err(Error::InvalidArgument(
                "feature CSV must start with id,label".into(),
            ));
        }
        let mut out = FeatureMatrix::new(header.iter().skip(2).map(String::from).collect());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let label = Label::parse(&rec[1]).ok_or_else(|| Error::UnknownLabel {
                line,
                label: rec[1].to_string(),
            })?;
            let row = rec
                .iter()
                .skip(2)
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Manifest {
                        line,
                        message: format!("bad value {v:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(rec[0].to_string(), label, row)?;
        }
        Ok(out)
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::File::open(path)
            .map_err(Error::from)
            .and_then(|f| Self::read_csv(std::io::BufReader::new(f)))
            .map_err(|e| e.in_file(path))
    }
}

/// Column indices of `dims`' registry whose layer tag equals `layer`.
pub fn layer_columns(dims: &TraceDims, layer: usize) -> Vec<usize> {
    tagged_registry(dims)
        .iter()
        .enumerate()
        .filter(|(_, f)| f.layer_tag == layer)
        .map(|(i, _)| i)
        .collect()
}

/// Runs `f` on a pool of `workers` threads, or on the current pool when `None`.
pub(crate) fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| Error::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Extracts one feature row per manifest entry, in manifest order.
///
/// All traces must share the model shape (sequence lengths may differ). With
/// `layer_filter`, only columns tagged with that layer are kept.
pub fn extract_matrix(
    manifest: &DatasetManifest,
    head: &ModelHead,
    layer_filter: Option<usize>,
    workers: Option<usize>,
) -> Result<FeatureMatrix> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lens = Lens::new(head)?;
    let rows = with_workers(workers, || {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let trace = read_trace_file(&path)?;
                head.check_compatible(trace.dims())
                    .map_err(|err| err.in_file(&path))?;
                let fv = extract_with_lens(&trace, &lens, &e.id)?;
                Ok((*trace.dims(), fv.values))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let dims = rows[0].0;
    for (e, (d, _)) in manifest.entries.iter().zip(&rows) {
        if !d.same_model(&dims) {
            return Err(Error::Heterogeneous(format!(
                "trace {} has dims {d:?}, first trace has {dims:?}",
                e.id
            )));
        }
    }
    let tagged = tagged_registry(&dims);
    let columns: Vec<usize> = match layer_filter {
        None => (0..tagged.len()).collect(),
        Some(layer) => {
            if layer > dims.n_layers {
                return Err(Error::InvalidArgument(format!(
                    "layer filter {layer} exceeds model depth {}",
                    dims.n_layers
                )));
            }
            layer_columns(&dims, layer)
        }
    };
    let mut out = FeatureMatrix::new(columns.iter().map(|&c| tagged[c].name.clone()).collect());
    for (e, (_, values)) in manifest.entries.iter().zip(rows) {
        let row = columns.iter().map(|&c| values[c]).collect();
        out.push(e.id.clone(), e.label, row)?;
    }
    Ok(out)
}
