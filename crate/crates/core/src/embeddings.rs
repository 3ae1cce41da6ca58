//! Loader for pretrained word vectors in the plain GloVe text layout:
//! one `word v1 v2 … v_d` line per word, space separated, UTF-8.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use numcore::Array;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, Default)]
pub struct PretrainedVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PretrainedVectors {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        Self::parse(BufReader::new(file), path)
    }

    /// Parses from any reader; `origin` only labels error messages.
    pub fn parse<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let mut out = Self::default();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let word = fields.next().expect("non-empty line has a field");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(format!("bad number `{f}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.is_empty() {
                return Err(parse_err(format!("word `{word}` has no vector")));
            }
            if out.dim == 0 {
                out.dim = values.len();
            } else if values.len() != out.dim {
                return Err(parse_err(format!(
                    "expected {} values, found {}",
                    out.dim,
                    values.len()
                )));
            }
            out.vectors.insert(word.to_string(), values);
        }
        Ok(out)
    }

    /// Overwrites embedding rows for vocabulary words present in the file.
    /// Other rows keep their existing (Xavier) values. Returns the hit count.
    pub fn apply(&self, embedding: &mut Array, vocab: &Vocabulary) -> Result<usize> {
        if self.is_empty() {
            return Ok(0);
        }
        if self.dim != embedding.cols() {
            return Err(Error::Config(format!(
                "pretrained vectors have dimension {}, embedding expects {}",
                self.dim,
                embedding.cols()
            )));
        }
        let mut hits = 0;
        for (id, token) in vocab.tokens().iter().enumerate().skip(2) {
            if let Some(v) = self.get(token) {
                embedding.row_slice_mut(id).copy_from_slice(v);
                hits += 1;
            }
        }
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::tokenize;

    fn parse(s: &str) -> Result<PretrainedVectors> {
        PretrainedVectors::parse(s.as_bytes(), Path::new("glove.txt"))
    }

    #[test]
    fn loads_and_applies_known_words() {
        let table = parse("weather 0.5 -1 2\nrecipe 1e-1 0 3\n\ncafé 1 1 1\n").unwrap();
        assert_eq!(table.dim(), 3);
        assert_eq!(table.len(), 3);
        assert_eq!(table.get("café"), Some(&[1.0, 1.0, 1.0][..]));

        let vocab = Vocabulary::from_sequences([&tokenize("what is the weather")]);
        let mut emb = Array::filled(vocab.len(), 3, 9.0);
        assert_eq!(table.apply(&mut emb, &vocab).unwrap(), 1);
        assert_eq!(emb.row_slice(vocab.id("weather")), &[0.5, -1.0, 2.0]);
        assert_eq!(emb.row_slice(vocab.id("what")), &[9.0, 9.0, 9.0]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse("a 1 2\nb 1\n").unwrap_err().to_string();
        assert!(err.contains("glove.txt:2"), "{err}");
        let err = parse("a 1 x\n").unwrap_err().to_string();
        assert!(err.contains(":1: bad number `x`"), "{err}");
    }

    #[test]
    fn dimension_mismatch_with_embedding() {
        let table = parse("a 1 2\n").unwrap();
        let mut emb = Array::zeros(3, 4);
        assert!(table.apply(&mut emb, &Vocabulary::new()).is_err());
    }
}
