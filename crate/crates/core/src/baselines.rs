//! Output-only reference attacks scored from final-layer lens predictions.
//!
//! Every score is oriented so that higher means more member-like.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_trace_file;
use crate::lens::Lens;
use crate::matrix::with_workers;
use crate::trace::{DatasetManifest, Label, ModelHead, SequenceTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Perplexity,
    MinK { k_percent: f64 },
    Zlib,
    Lowercase,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Perplexity => "ppl",
            Method::MinK { .. } => "mink",
            Method::Zlib => "zlib",
            Method::Lowercase => "lowercase",
        }
    }
}

/// Mean negative log-likelihood of the given next-token log-probabilities.
pub fn nll(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::SequenceTooShort(logprobs.len() + 1));
    }
    Ok(-logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    Ok(nll(logprobs)?.exp())
}

/// Next-token log-probabilities from the last layer of `trace`.
pub fn final_logprobs(trace: &SequenceTrace, lens: &Lens) -> Result<Vec<f64>> {
    lens.next_token_logprobs(trace, trace.dims().n_layers)
}

/// Negative perplexity.
pub fn perplexity_score(trace: &SequenceTrace, lens: &Lens) -> Result<f64> {
    Ok(-perplexity(&final_logprobs(trace, lens)?)?)
}

/// Mean of the `⌈k%·count⌉` smallest log-probabilities (at least one).
pub fn min_k_from_logprobs(logprobs: &[f64], k_percent: f64) -> Result<f64> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "k = {k_percent} not in (0, 100]"
        )));
    }
    if logprobs.is_empty() {
        return Err(Error::SequenceTooShort(1));
    }
    let mut sorted = logprobs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let take = ((k_percent / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

pub fn min_k_score(trace: &SequenceTrace, lens: &Lens, k_percent: f64) -> Result<f64> {
    min_k_from_logprobs(&final_logprobs(trace, lens)?, k_percent)
}

/// Size in bytes of `text` compressed with zlib at the default level.
pub fn zlib_len(text: &[u8]) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// `−(total NLL in bits) / (compressed size in bits)`.
pub fn zlib_from_logprobs(logprobs: &[f64], text: &[u8]) -> Result<f64> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("empty text".into()));
    }
    let nll_bits = nll(logprobs)? / std::f64::consts::LN_2 * logprobs.len() as f64;
    Ok(-(nll_bits / (8 * zlib_len(text)) as f64))
}

pub fn zlib_score(trace: &SequenceTrace, lens: &Lens, text: &[u8]) -> Result<f64> {
    zlib_from_logprobs(&final_logprobs(trace, lens)?, text)
}

/// `−(ppl_original / ppl_lowercased)`.
pub fn lowercase_score(
    original: &SequenceTrace,
    lowercased: &SequenceTrace,
    lens: &Lens,
) -> Result<f64> {
    let a = perplexity(&final_logprobs(original, lens)?)?;
    let b = perplexity(&final_logprobs(lowercased, lens)?)?;
    Ok(-(a / b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub id: String,
    pub label: Label,
    pub method: String,
    pub score: f64,
}

/// Scores every manifest entry. `paired` supplies lowercased traces by id
/// and is required for [`Method::Lowercase`].
pub fn score_manifest(
    manifest: &DatasetManifest,
    head: &ModelHead,
    method: Method,
    paired: Option<&DatasetManifest>,
    workers: Option<usize>,
) -> Result<Vec<BaselineRow>> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if method == Method::Lowercase && paired.is_none() {
        return Err(Error::InvalidArgument(
            "the lowercase method needs a paired manifest".into(),
        ));
    }
    let lens = Lens::new(head)?;
    with_workers(workers, || {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let trace = read_trace_file(&path)?;
                let score = match method {
                    Method::Perplexity => perplexity_score(&trace, &lens),
                    Method::MinK { k_percent } => min_k_score(&trace, &lens, k_percent),
                    Method::Zlib => {
                        let text = e
                            .text
                            .as_deref()
                            .ok_or_else(|| Error::MissingText(e.id.clone()))?;
                        zlib_score(&trace, &lens, text.as_bytes())
                    }
                    Method::Lowercase => {
                        let pm = paired.expect("checked above");
                        let pe = pm
                            .get(&e.id)
                            .ok_or_else(|| Error::MissingPair(e.id.clone()))?;
                        let lower = read_trace_file(pm.resolve(pe))?;
                        lowercase_score(&trace, &lower, &lens)
                    }
                }
                .map_err(|err| err.in_file(&path))?;
                Ok(BaselineRow {
                    id: e.id.clone(),
                    label: e.label,
                    method: method.name().to_string(),
                    score,
                })
            })
            .collect()
    })?
}

pub fn write_baseline_csv<W: Write>(rows: &[BaselineRow], dest: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(dest);
    w.write_record(["id", "label", "method", "score"])?;
    for r in rows {
        w.write_record([
            r.id.as_str(),
            r.label.as_str(),
            r.method.as_str(),
            &format!("{:.16e}", r.score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_examples() {
        let half = std::f64::consts::LN_2;
        assert!((perplexity(&[-half, -half, -half]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(nll(&[-1.0, -3.0]).unwrap(), 2.0);
        assert!((perplexity(&[-1.0, -3.0]).unwrap() - 7.389_056_098_930_65).abs() < 1e-12);
    }

    #[test]
    fn min_k_examples() {
        let lp = [-1.0, -2.0, -3.0, -4.0];
        assert_eq!(min_k_from_logprobs(&lp, 50.0).unwrap(), -3.5);
        assert_eq!(min_k_from_logprobs(&lp, 100.0).unwrap(), -2.5);
        assert_eq!(min_k_from_logprobs(&lp, 1.0).unwrap(), -4.0);
        assert_eq!(min_k_from_logprobs(&lp, 100.0).unwrap(), -nll(&lp).unwrap());
        assert!(min_k_from_logprobs(&lp, 0.0).is_err());
        assert!(min_k_from_logprobs(&lp, 101.0).is_err());
    }

    #[test]
    fn zlib_examples() {
        let lp = [-1.0, -2.0];
        let text = [b'a'; 64];
        let size = zlib_len(&text);
        // Measured once with the default backend and level.
        assert_eq!(size, 22);
        let expected = -((3.0 / std::f64::consts::LN_2) / (8 * size) as f64);
        assert_eq!(zlib_from_logprobs(&lp, &text).unwrap(), expected);

        let varied: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(37)).collect();
        assert!(zlib_len(&varied) > size);
        // Same trace, larger compressed size → score closer to zero.
        assert!(
            zlib_from_logprobs(&lp, &varied).unwrap() > zlib_from_logprobs(&lp, &text).unwrap()
        );
        assert!(zlib_from_logprobs(&lp, b"").is_err());
    }

    #[test]
    fn lowercase_examples() {
        let dims = crate::trace::TraceDims::new(1, 1, 4, 2, 3);
        let t = crate::trace::testing::uniform_trace(dims, 4);
        let head = ModelHead {
            hidden_dim: 2,
            vocab_size: 3,
            norm_kind: crate::trace::NormKind::Identity,
            norm_epsilon: 1e-5,
            gain: vec![1.0; 2],
            bias: vec![0.0; 2],
            unembed: vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.6],
            unembed_bias: None,
        };
        let lens = Lens::new(&head).unwrap();
        assert_eq!(lowercase_score(&t, &t, &lens).unwrap(), -1.0);
        let ppl = perplexity(&final_logprobs(&t, &lens).unwrap()).unwrap();
        assert!((perplexity_score(&t, &lens).unwrap() + ppl).abs() < 1e-15);
    }

    #[test]
    fn baseline_csv_format() {
        let rows = vec![BaselineRow {
            id: "a".into(),
            label: Label::Member,
            method: "ppl".into(),
            score: -2.0,
        }];
        let mut buf = Vec::new();
        write_baseline_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,label,method,score\na,member,ppl,-2.0000000000000000e0\n"
        );
    }
}
