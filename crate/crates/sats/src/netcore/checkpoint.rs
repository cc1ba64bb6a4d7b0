//! Versioned binary checkpoint format: a magic header, class counts, then
//! each parameter tensor with a shape header and little-endian f64 data.
//! Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ConvLayer, NetworkParams, HIDDEN_CHANNELS};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SATSCKP\x01";

fn push_tensor(buf: &mut Vec<u8>, dims: &[u32], data: &[f64]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    debug_assert_eq!(dims.iter().product::<u32>() as usize, data.len());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.num_known as u32).to_le_bytes());
    buf.extend_from_slice(&(params.head_channels() as u32).to_le_bytes());
    for layer in [&params.conv1, &params.conv2, &params.conv3] {
        push_tensor(
            &mut buf,
            &[layer.out_channels as u32, layer.in_channels as u32, 3, 3],
            &layer.weights,
        );
        push_tensor(&mut buf, &[layer.out_channels as u32], &layer.bias);
    }
    let c = params.head_channels() as u32;
    push_tensor(&mut buf, &[c, HIDDEN_CHANNELS as u32], &params.head_weights);
    push_tensor(&mut buf, &[c], &params.head_bias);

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::validation(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expect_dims: &[u32]) -> Result<Vec<f64>> {
        let ndim = self.u32()? as usize;
        if ndim != expect_dims.len() {
            return Err(Error::validation(format!(
                "{}: tensor rank {} where {} expected",
                self.path.display(),
                ndim,
                expect_dims.len()
            )));
        }
        let mut count = 1usize;
        for &e in expect_dims {
            let d = self.u32()?;
            if d != e {
                return Err(Error::validation(format!(
                    "{}: tensor dim {d} where {e} expected",
                    self.path.display()
                )));
            }
            count *= d as usize;
        }
        let raw = self.take(8 * count)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::validation(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let num_known = r.u32()? as usize;
    let head_channels = r.u32()? as usize;
    if head_channels != num_known && head_channels != num_known + 1 {
        return Err(Error::validation(format!(
            "{}: head has {head_channels} channels for {num_known} known classes",
            path.display()
        )));
    }
    let hidden = HIDDEN_CHANNELS as u32;
    let mut convs = Vec::with_capacity(3);
    for (in_ch, out_ch) in [(3, hidden), (hidden, hidden), (hidden, hidden)] {
        let weights = r.tensor(&[out_ch, in_ch, 3, 3])?;
        let bias = r.tensor(&[out_ch])?;
        convs.push(ConvLayer {
            weights,
            bias,
            in_channels: in_ch as usize,
            out_channels: out_ch as usize,
        });
    }
    let head_weights = r.tensor(&[head_channels as u32, hidden])?;
    let head_bias = r.tensor(&[head_channels as u32])?;
    if r.pos != buf.len() {
        return Err(Error::validation(format!(
            "{}: {} trailing bytes",
            path.display(),
            buf.len() - r.pos
        )));
    }
    let conv3 = convs.pop().unwrap();
    let conv2 = convs.pop().unwrap();
    let conv1 = convs.pop().unwrap();
    let params = NetworkParams {
        conv1,
        conv2,
        conv3,
        head_weights,
        head_bias,
        num_known,
    };
    params.check_finite("checkpoint")?;
    Ok(params)
}
