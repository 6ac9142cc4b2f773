//! `PTS3` checkpoint container.
//!
//! Layout (all little-endian):
//! magic `PTS3`, u32 version, u32 input dim, u32 hidden-layer count, u32 per
//! hidden width, u32 code bits; then f32 parameters of the student, the
//! teacher and the momentum buffers, each layer as weights (row-major) then
//! bias; then f32 learning rate, momentum and lower-layer scale.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::{Architecture, EncoderParams, Gradients, OptimizerState};
use crate::error::{Error, Result};
use crate::io::{read_f32s, read_u32, write_f32s, write_u32};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTS3";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub student: EncoderParams,
    pub teacher: EncoderParams,
    pub optimizer: OptimizerState,
}

fn write_params<'a>(w: &mut impl Write, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let v: Vec<f64> = values.copied().collect();
    write_f32s(w, &v)
}

fn read_params(r: &mut impl Read, arch: &Architecture) -> Result<EncoderParams> {
    let mut p = EncoderParams::zeros(arch)?;
    let vals = read_f32s(r, p.num_params())?;
    for (dst, src) in p.iter_mut().zip(vals) {
        *dst = src;
    }
    Ok(p)
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.student.check_congruent(&self.teacher)?;
        let arch = &self.student.arch;
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        write_u32(&mut w, arch.input_dim as u32)?;
        write_u32(&mut w, arch.hidden.len() as u32)?;
        for &h in &arch.hidden {
            write_u32(&mut w, h as u32)?;
        }
        write_u32(&mut w, arch.code_bits as u32)?;
        write_params(&mut w, self.student.iter())?;
        write_params(&mut w, self.teacher.iter())?;
        write_params(&mut w, self.optimizer.velocity.iter())?;
        write_f32s(
            &mut w,
            &[
                self.optimizer.lr,
                self.optimizer.momentum,
                self.optimizer.lower_layer_scale,
            ],
        )?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let input_dim = read_u32(&mut r)? as usize;
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_hidden}")));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let code_bits = read_u32(&mut r)? as usize;
        let arch = Architecture::new(input_dim, hidden, code_bits);
        arch.validate()?;
        let student = read_params(&mut r, &arch)?;
        let teacher = read_params(&mut r, &arch)?;
        let vel = read_params(&mut r, &arch)?;
        let trailer = read_f32s(&mut r, 3)?;
        let optimizer = OptimizerState {
            velocity: Gradients { layers: vel.layers },
            lr: trailer[0],
            momentum: trailer[1],
            lower_layer_scale: trailer[2],
        };
        Ok(Self {
            student,
            teacher,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    #[test]
    fn roundtrip_is_f32_exact() {
        let arch = Architecture::new(5, vec![7, 3], 4);
        let student = init_params(1, &arch).unwrap();
        let teacher = init_params(2, &arch).unwrap();
        let mut optimizer = OptimizerState::new(&student, 0.01, 0.9).with_lower_layer_scale(0.1);
        optimizer.velocity.layers[1].bias[2] = 0.25;
        let ck = Checkpoint {
            student,
            teacher,
            optimizer,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PTS3");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        for (a, b) in back.student.iter().zip(ck.student.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (a, b) in back.teacher.iter().zip(ck.teacher.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(back.optimizer.velocity.layers[1].bias[2], 0.25);
        assert_eq!(back.optimizer.momentum, 0.9f32 as f64);
    }

    #[test]
    fn truncated_file_rejected() {
        let arch = Architecture::new(2, vec![], 2);
        let p = init_params(0, &arch).unwrap();
        let ck = Checkpoint {
            optimizer: OptimizerState::new(&p, 0.1, 0.9),
            teacher: p.clone(),
            student: p,
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }
}
