use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::{ParamEntry, ParamId, ParamStore, Real, Tensor};

/// Range of the uniform draw for tokens missing from the vector file.
pub const OOV_RANGE: f64 = 0.25;

/// Word vectors parsed from a `token v1 … vd` text file.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

impl WordVectors {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = WordVectors::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            // word2vec text files open with a `count dim` header line
            if lineno == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
                continue;
            }
            let parsed: Vec<f32> = values
                .iter()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("word vectors line {}: {e}", lineno + 1)))?;
            if parsed.is_empty() {
                return Err(Error::Data(format!("word vectors line {}: no values", lineno + 1)));
            }
            if out.dim == 0 {
                out.dim = parsed.len();
            } else if parsed.len() != out.dim {
                return Err(Error::Data(format!(
                    "word vectors line {}: dimension {} differs from {}",
                    lineno + 1,
                    parsed.len(),
                    out.dim
                )));
            }
            out.vectors.entry(token.to_string()).or_insert(parsed);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::path(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// A vocabulary-indexed embedding matrix stored as one parameter.
#[derive(Debug, Clone)]
pub struct StaticTable {
    pub param: ParamId,
    pub dim: usize,
    pub trainable: bool,
}

impl StaticTable {
    /// Copy rows for in-vocabulary tokens, draw the rest from a seeded
    /// uniform on `[-0.25, 0.25]`, and pin the PAD row at zero.
    pub fn build<T: Real>(
        vectors: &WordVectors,
        vocab: &Vocabulary,
        trainable: bool,
        oov_seed: u64,
        name: &str,
        params: &mut ParamStore<T>,
    ) -> Result<Self> {
        let dim = vectors.dim;
        let hits = (2..vocab.len())
            .filter(|&i| vectors.vectors.contains_key(vocab.token(i).unwrap_or_default()))
            .count();
        if dim == 0 || hits == 0 {
            return Err(Error::Data(
                "word vectors share no tokens with the vocabulary".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(oov_seed);
        let mut data = Vec::with_capacity(vocab.len() * dim);
        for i in 0..vocab.len() {
            let token = vocab.token(i).unwrap_or_default();
            match vectors.vectors.get(token) {
                _ if i == PAD => data.extend(std::iter::repeat_n(T::zero(), dim)),
                Some(v) => data.extend(v.iter().map(|&x| T::of(x as f64))),
                None => data.extend(
                    (0..dim).map(|_| T::of(rng.gen_range(-OOV_RANGE..=OOV_RANGE))),
                ),
            }
        }
        let param = params.insert(ParamEntry {
            name: name.to_string(),
            value: Tensor::new(&[vocab.len(), dim], data)?,
            trainable,
            decay: false,
            pinned_row: Some(PAD),
        })?;
        Ok(StaticTable {
            param,
            dim,
            trainable,
        })
    }

    /// Empty table of the right geometry, to be filled from a checkpoint.
    pub fn placeholder<T: Real>(
        vocab_len: usize,
        dim: usize,
        trainable: bool,
        name: &str,
        params: &mut ParamStore<T>,
    ) -> Result<Self> {
        let param = params.insert(ParamEntry {
            name: name.to_string(),
            value: Tensor::zeros(&[vocab_len, dim]),
            trainable,
            decay: false,
            pinned_row: Some(PAD),
        })?;
        Ok(StaticTable {
            param,
            dim,
            trainable,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(tokens.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn copies_known_rows_and_zeroes_pad() {
        let wv = WordVectors::from_reader("a 1 0\n".as_bytes()).unwrap();
        let mut params = ParamStore::<f32>::new();
        let t = StaticTable::build(&wv, &vocab(&["a"]), true, 1, "static0.table", &mut params).unwrap();
        let m = params.value(t.param);
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(&m.data()[0..2], &[0.0, 0.0]);
        assert_eq!(&m.data()[4..6], &[1.0, 0.0]);
        assert!(m.data()[2..4].iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn oov_rows_are_reproducible() {
        let wv = WordVectors::from_reader("a 1 0\n".as_bytes()).unwrap();
        let v = vocab(&["a", "b", "c"]);
        let mut p1 = ParamStore::<f32>::new();
        let mut p2 = ParamStore::<f32>::new();
        let t1 = StaticTable::build(&wv, &v, true, 42, "t", &mut p1).unwrap();
        let t2 = StaticTable::build(&wv, &v, true, 42, "t", &mut p2).unwrap();
        assert_eq!(p1.value(t1.param), p2.value(t2.param));
        let row_b = &p1.value(t1.param).data()[6..8];
        assert!(row_b.iter().all(|x| x.abs() <= 0.25 && *x != 0.0));
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let err = WordVectors::from_reader("a 1 0\nb 1 2 3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("dimension"));
    }

    #[test]
    fn skips_word2vec_header_and_needs_overlap() {
        let wv = WordVectors::from_reader("2 2\nx 1 1\ny 0 1\n".as_bytes()).unwrap();
        assert_eq!(wv.dim, 2);
        let mut params = ParamStore::<f32>::new();
        assert!(StaticTable::build(&wv, &vocab(&["a"]), true, 0, "t", &mut params).is_err());
    }
}
