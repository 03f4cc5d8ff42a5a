//! Binary parameter snapshots.
//!
//! Layout: a header line `s2mckpt1 <digest> <step_count> <num_params>`, then
//! per parameter a line `param <name> <rank> <dims...>` followed by the
//! little-endian `f64` bytes of its value, first moment and second moment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "s2mckpt1";

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Serialize every parameter with its Adam state. `digest` identifies the
/// configuration that produced the store.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    digest: &str,
) -> std::io::Result<()> {
    writeln!(
        w,
        "{CHECKPOINT_MAGIC} {digest} {} {}",
        store.step_count,
        store.len()
    )?;
    for i in 0..store.len() {
        let shape = store.values[i].shape();
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        writeln!(
            w,
            "param {} {} {}",
            store.names[i],
            shape.len(),
            dims.join(" ")
        )?;
        write_f64s(&mut w, store.values[i].data())?;
        write_f64s(&mut w, store.m1[i].data())?;
        write_f64s(&mut w, store.m2[i].data())?;
    }
    w.flush()
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub store: ParamStore,
}

fn header_line<R: BufRead>(r: &mut R) -> Result<Vec<String>> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    if !line.ends_with('\n') {
        return Err(Error::data("truncated checkpoint"));
    }
    Ok(line.split_whitespace().map(str::to_owned).collect())
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::data(format!("checkpoint {what} `{s}` is not a number")))
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let head = header_line(&mut r)?;
    if head.len() != 4 || head[0] != CHECKPOINT_MAGIC {
        return Err(Error::data("not a checkpoint file"));
    }
    let mut store = ParamStore::new();
    store.step_count = parse_num(&head[2], "step count")?;
    let count: usize = parse_num(&head[3], "parameter count")?;
    for _ in 0..count {
        let fields = header_line(&mut r)?;
        if fields.len() < 3 || fields[0] != "param" {
            return Err(Error::data("malformed parameter record"));
        }
        let rank: usize = parse_num(&fields[2], "rank")?;
        if fields.len() != 3 + rank {
            return Err(Error::data(format!(
                "parameter `{}` has a bad shape line",
                fields[1]
            )));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| parse_num(d, "dimension"))
            .collect::<Result<Vec<usize>>>()?;
        let len = shape.iter().product();
        let mut block =
            || read_f64s(&mut r, len).map_err(|e| Error::data(format!("checkpoint body: {e}")));
        let (value, m1, m2) = (block()?, block()?, block()?);
        let id = store.add(fields[1].clone(), Tensor::new(shape.clone(), value)?)?;
        store.m1[id.0] = Tensor::new(shape.clone(), m1)?;
        store.m2[id.0] = Tensor::new(shape, m2)?;
    }
    Ok(Checkpoint {
        digest: head[1].clone(),
        store,
    })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, digest: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), store, digest).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

impl Checkpoint {
    /// Copy values and optimizer state into a store with the same names and
    /// shapes, in the same order.
    pub fn load_into(&self, target: &mut ParamStore) -> Result<()> {
        let src = &self.store;
        if src.names != target.names {
            return Err(Error::config(
                "checkpoint parameters do not match the model",
            ));
        }
        if let Some(i) = (0..src.len()).find(|&i| src.values[i].shape() != target.values[i].shape())
        {
            return Err(Error::config(format!(
                "checkpoint shape {:?} for `{}` does not match the model's {:?}",
                src.values[i].shape(),
                src.names[i],
                target.values[i].shape()
            )));
        }
        target.values.clone_from(&src.values);
        target.m1.clone_from(&src.m1);
        target.m2.clone_from(&src.m2);
        target.step_count = src.step_count;
        target.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store
            .add_uniform("conv.w", &[2, 3, 1, 2], 6, &mut rng)
            .unwrap();
        store.add_uniform("fc.b", &[5], 5, &mut rng).unwrap();
        store.m1[0].data_mut()[1] = f64::MIN_POSITIVE;
        store.m2[1].data_mut()[4] = 1.0 / 3.0;
        store.step_count = 17;

        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, "abc123").unwrap();
        let ckpt = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ckpt.digest, "abc123");
        assert_eq!(ckpt.store, store);

        let mut other = ParamStore::new();
        other.add_zeros("conv.w", &[2, 3, 1, 2]).unwrap();
        other.add_zeros("fc.b", &[5]).unwrap();
        ckpt.load_into(&mut other).unwrap();
        assert_eq!(other, store);

        let mut wrong = ParamStore::new();
        wrong.add_zeros("conv.w", &[2, 3, 2, 1]).unwrap();
        wrong.add_zeros("fc.b", &[5]).unwrap();
        assert!(ckpt.load_into(&mut wrong).is_err());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut store = ParamStore::new();
        store.add_zeros("w", &[4]).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, "d").unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(bytes.as_slice()).is_err());
        assert!(read_checkpoint(&b"garbage\n"[..]).is_err());
    }
}
