//! On-disk formats: the spectral-cube container, portable pixmaps for
//! ordinary images, and training checkpoints.
//!
//! All multi-byte integers are little-endian. Malformed input is rejected
//! with the byte offset of the first bad field, so corrupt files can be
//! diagnosed rather than guessed at.
//!
//! Cube container layout (payload samples are f32; parameters and optimizer
//! state in checkpoints stay f64 so resumed runs are bit-identical):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "XRFC"
//! 4       2     version (= 1)
//! 6       4     channels (u32, >= 1)
//! 10      4     height   (u32, >= 1)
//! 14      4     width    (u32, >= 1)
//! 18      4*n   payload: channels*height*width f32, channel-major row-major
//! ```

use crate::cube::SpectralCube;
use crate::discriminator::DiscriminatorParams;
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::optim::AdamState;
use std::io::Write;
use std::path::Path;

const CUBE_MAGIC: &[u8; 4] = b"XRFC";
const CUBE_VERSION: u16 = 1;
const CUBE_HEADER_LEN: usize = 18;

const CKPT_MAGIC: &[u8; 4] = b"XRFK";
const CKPT_VERSION: u16 = 1;

// ── little-endian slice reader with positioned errors ───────────────────────

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.buf.len() as u64,
                format!(
                    "{what} truncated: need {n} bytes at offset {}, file ends at {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        let b = self.take(16, what)?;
        Ok(u128::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect())
    }

    fn expect_end(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "{what} has {} trailing bytes after expected end",
                    self.buf.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

// ── cube container ──────────────────────────────────────────────────────────

pub fn cube_to_bytes(cube: &SpectralCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * cube.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&(cube.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.height() as u32).to_le_bytes());
    out.extend_from_slice(&(cube.width() as u32).to_le_bytes());
    for &v in cube.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn cube_from_bytes(buf: &[u8]) -> Result<SpectralCube> {
    let mut c = Cursor::new(buf);
    let magic = c.take(4, "cube magic")?;
    if magic != CUBE_MAGIC {
        return Err(Error::format(0, format!("bad cube magic {magic:02x?}")));
    }
    let at = c.offset();
    let version = c.u16("cube version")?;
    if version != CUBE_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported cube version {version}"),
        ));
    }
    let mut dim = |name: &str| -> Result<usize> {
        let at = c.offset();
        let v = c.u32(name)?;
        if v == 0 {
            return Err(Error::format(at, format!("{name} must be >= 1")));
        }
        Ok(v as usize)
    };
    let channels = dim("cube channels")?;
    let height = dim("cube height")?;
    let width = dim("cube width")?;
    let n = channels
        .checked_mul(height)
        .and_then(|x| x.checked_mul(width))
        .ok_or_else(|| Error::format(6, "cube extents overflow".to_string()))?;
    let payload = c.take(4 * n, "cube payload")?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunked by 4")) as f64)
        .collect();
    c.expect_end("cube")?;
    SpectralCube::from_values(channels, height, width, data)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &SpectralCube) -> Result<()> {
    let bytes = cube_to_bytes(cube);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let buf = std::fs::read(path)?;
    cube_from_bytes(&buf)
}

// ── portable pixmaps ────────────────────────────────────────────────────────

/// Parses a binary P6 pixmap with 8-bit samples (maxval must be 255);
/// values are scaled into `[0, 1]`. Header comments (`#`) are allowed.
pub fn ppm_from_bytes(buf: &[u8]) -> Result<SpectralCube> {
    struct Header<'a> {
        buf: &'a [u8],
        pos: usize,
    }
    impl<'a> Header<'a> {
        fn token(&mut self, what: &str) -> Result<(usize, &'a [u8])> {
            // skip whitespace and comments
            loop {
                while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                if self.pos < self.buf.len() && self.buf[self.pos] == b'#' {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = self.pos;
            while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(Error::format(
                    start as u64,
                    format!("missing {what} in pixmap header"),
                ));
            }
            Ok((start, &self.buf[start..self.pos]))
        }

        fn number(&mut self, what: &str) -> Result<(usize, usize)> {
            let (at, tok) = self.token(what)?;
            std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .map(|v| (at, v))
                .ok_or_else(|| Error::format(at as u64, format!("invalid {what}")))
        }
    }

    let mut h = Header { buf, pos: 0 };
    let (at, magic) = h.token("magic")?;
    if magic != b"P6" {
        return Err(Error::format(
            at as u64,
            format!("expected P6 pixmap, got {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let (at, width) = h.number("width")?;
    if width == 0 {
        return Err(Error::format(at as u64, "width must be >= 1".to_string()));
    }
    let (at, height) = h.number("height")?;
    if height == 0 {
        return Err(Error::format(at as u64, "height must be >= 1".to_string()));
    }
    let (maxval_at, maxval) = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_at as u64,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    // exactly one whitespace byte separates header from payload
    let mut pos = h.pos;
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(
            pos as u64,
            "missing separator before pixmap payload".to_string(),
        ));
    }
    pos += 1;
    let need = width * height * 3;
    if buf.len() - pos < need {
        return Err(Error::format(
            buf.len() as u64,
            format!(
                "pixmap payload truncated: need {need} bytes, found {}",
                buf.len() - pos
            ),
        ));
    }
    if buf.len() - pos > need {
        return Err(Error::format(
            (pos + need) as u64,
            "pixmap has trailing bytes".to_string(),
        ));
    }
    // interleaved RGB -> channel-major planes
    let mut cube = SpectralCube::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let base = pos + (y * width + x) * 3;
            for c in 0..3 {
                cube.set(c, y, x, buf[base + c] as f64 / 255.0);
            }
        }
    }
    Ok(cube)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let buf = std::fs::read(path)?;
    ppm_from_bytes(&buf)
}

/// Encodes one plane as a binary P5 graymap: samples are clipped into
/// `[0, 1]` and rounded to 8 bits.
pub fn pgm_to_bytes(plane: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if height == 0 || width == 0 || plane.len() != height * width {
        return Err(Error::dimension(format!(
            "plane of {} samples does not fill {height}x{width}",
            plane.len()
        )));
    }
    let mut out = Vec::with_capacity(32 + plane.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &v in plane {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    plane: &[f64],
    height: usize,
    width: usize,
) -> Result<()> {
    let bytes = pgm_to_bytes(plane, height, width)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

// ── checkpoints ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Adversarial,
}

/// Complete training state: both networks, both optimizer states, progress
/// counters, and the RNG stream position. Loading a checkpoint and resuming
/// reproduces the uninterrupted run bit for bit, which is why parameters are
/// stored at full f64 precision along with the 128-bit stream position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub stage: TrainStage,
    pub pretrain_steps_done: u64,
    pub adversarial_steps_done: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

fn push_adam(out: &mut Vec<u8>, state: &AdamState) {
    out.extend_from_slice(&state.beta1.to_le_bytes());
    out.extend_from_slice(&state.beta2.to_le_bytes());
    out.extend_from_slice(&state.eps.to_le_bytes());
    out.extend_from_slice(&state.step_count().to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(match ck.stage {
        TrainStage::Pretrain => 0,
        TrainStage::Adversarial => 1,
    });
    out.push(0); // reserved
    out.extend_from_slice(&ck.pretrain_steps_done.to_le_bytes());
    out.extend_from_slice(&ck.adversarial_steps_done.to_le_bytes());
    out.extend_from_slice(&(ck.generator.spectral_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(ck.generator.rgb_channels() as u32).to_le_bytes());
    out.extend_from_slice(&(ck.generator.code_atoms() as u32).to_le_bytes());
    out.extend_from_slice(&(ck.generator.num_layers() as u32).to_le_bytes());
    out.extend_from_slice(&(ck.discriminator.patch_size() as u32).to_le_bytes());
    out.extend_from_slice(&ck.rng_seed);
    out.extend_from_slice(&ck.rng_word_pos.to_le_bytes());
    push_adam(&mut out, &ck.gen_opt);
    push_adam(&mut out, &ck.disc_opt);

    for t in ck.generator.tensors() {
        push_f64s(&mut out, t.values());
    }
    let (m, v) = ck.gen_opt.moments();
    for vals in m.iter().chain(v.iter()) {
        push_f64s(&mut out, vals);
    }
    for t in ck.discriminator.tensors() {
        push_f64s(&mut out, t.values());
    }
    let (m, v) = ck.disc_opt.moments();
    for vals in m.iter().chain(v.iter()) {
        push_f64s(&mut out, vals);
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(buf);
    let magic = c.take(4, "checkpoint magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(0, format!("bad checkpoint magic {magic:02x?}")));
    }
    let at = c.offset();
    let version = c.u16("checkpoint version")?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            at,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let at = c.offset();
    let stage = match c.take(1, "stage")?[0] {
        0 => TrainStage::Pretrain,
        1 => TrainStage::Adversarial,
        other => return Err(Error::format(at, format!("unknown stage byte {other}"))),
    };
    c.take(1, "reserved")?;
    let pretrain_steps_done = c.u64("pretrain step counter")?;
    let adversarial_steps_done = c.u64("adversarial step counter")?;
    let mut dim = |name: &str, min: u32| -> Result<usize> {
        let at = c.offset();
        let v = c.u32(name)?;
        if v < min {
            return Err(Error::format(at, format!("{name} must be >= {min}")));
        }
        Ok(v as usize)
    };
    let spectral = dim("spectral channels", 1)?;
    let rgb = dim("rgb channels", 1)?;
    let atoms = dim("code atoms", 1)?;
    let layers = dim("layer count", 0)?;
    let patch = dim("patch size", 1)?;
    let rng_seed: [u8; 32] = c.take(32, "rng seed")?.try_into().expect("length checked");
    let rng_word_pos = c.u128("rng word position")?;

    let mut adam_header = |what: &str| -> Result<(f64, f64, f64, u64)> {
        Ok((
            c.f64(&format!("{what} beta1"))?,
            c.f64(&format!("{what} beta2"))?,
            c.f64(&format!("{what} eps"))?,
            c.u64(&format!("{what} step"))?,
        ))
    };
    let gen_adam = adam_header("generator optimizer")?;
    let disc_adam = adam_header("discriminator optimizer")?;

    // Generator tensors in canonical order.
    let input = spectral + rgb;
    let mut gen_shapes: Vec<Vec<usize>> = Vec::new();
    for _ in 0..layers {
        gen_shapes.push(vec![atoms, atoms]);
        gen_shapes.push(vec![atoms, input]);
        gen_shapes.push(vec![atoms]);
    }
    gen_shapes.push(vec![input, atoms]);
    gen_shapes.push(vec![input]);

    let read_tensors = |c: &mut Cursor, shapes: &[Vec<usize>], what: &str| -> Result<Vec<crate::tensor::Tensor>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let vals = c.f64_vec(n, what)?;
                crate::tensor::Tensor::new(s.clone(), vals)
            })
            .collect()
    };
    let read_moments = |c: &mut Cursor, shapes: &[Vec<usize>], what: &str| -> Result<Vec<Vec<f64>>> {
        shapes
            .iter()
            .map(|s| c.f64_vec(s.iter().product(), what))
            .collect()
    };

    let gen_tensors = read_tensors(&mut c, &gen_shapes, "generator parameters")?;
    let gen_m = read_moments(&mut c, &gen_shapes, "generator optimizer moments")?;
    let gen_v = read_moments(&mut c, &gen_shapes, "generator optimizer moments")?;

    let disc_probe = DiscriminatorParams::init(patch, 0)?;
    let disc_shapes: Vec<Vec<usize>> = disc_probe
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let disc_tensors = read_tensors(&mut c, &disc_shapes, "discriminator parameters")?;
    let disc_m = read_moments(&mut c, &disc_shapes, "discriminator optimizer moments")?;
    let disc_v = read_moments(&mut c, &disc_shapes, "discriminator optimizer moments")?;
    c.expect_end("checkpoint")?;

    let generator = GeneratorParams::from_tensors(spectral, rgb, atoms, layers, gen_tensors)?;
    let discriminator = DiscriminatorParams::from_tensors(patch, disc_tensors)?;
    let gen_opt = AdamState::from_parts(gen_m, gen_v, gen_adam.3, gen_adam.0, gen_adam.1, gen_adam.2)?;
    let disc_opt =
        AdamState::from_parts(disc_m, disc_v, disc_adam.3, disc_adam.0, disc_adam.1, disc_adam.2)?;

    Ok(Checkpoint {
        generator,
        discriminator,
        gen_opt,
        disc_opt,
        stage,
        pretrain_steps_done,
        adversarial_steps_done,
        rng_seed,
        rng_word_pos,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ck);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    checkpoint_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cube(c: usize, h: usize, w: usize, seed: u64) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        SpectralCube::from_values(c, h, w, data).unwrap()
    }

    #[test]
    fn unit_cube_is_twenty_two_bytes_with_documented_header() {
        let cube = SpectralCube::from_values(1, 1, 1, vec![0.5]).unwrap();
        let bytes = cube_to_bytes(&cube);
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[0..4], b"XRFC");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &0.5f32.to_le_bytes());
    }

    #[test]
    fn cube_write_read_write_is_byte_identical() {
        let cube = random_cube(3, 5, 7, 1);
        let bytes = cube_to_bytes(&cube);
        let back = cube_from_bytes(&bytes).unwrap();
        assert_eq!(cube_to_bytes(&back), bytes);
        // f32 storage: values agree to single precision
        for (a, b) in cube.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn malformed_cubes_are_rejected_with_offsets() {
        let good = cube_to_bytes(&random_cube(2, 2, 2, 2));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Y';
        match cube_from_bytes(&bad_magic) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        match cube_from_bytes(&bad_version) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut zero_chan = good.clone();
        zero_chan[6..10].copy_from_slice(&[0, 0, 0, 0]);
        match cube_from_bytes(&zero_chan) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected format error, got {other:?}"),
        }

        let truncated = &good[..good.len() - 3];
        match cube_from_bytes(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.push(0);
        match cube_from_bytes(&trailing) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, good.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cube_file_roundtrip() {
        let dir = std::env::temp_dir().join("xrfc_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cube.xrfc");
        let cube = random_cube(4, 6, 6, 3);
        write_cube(&path, &cube).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(cube_to_bytes(&back), cube_to_bytes(&cube));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn ppm_parses_8bit_binary_images() {
        // 2x1 image: red-ish pixel then mid-gray, with a header comment
        let mut bytes = b"P6\n# test\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 128, 128, 128]);
        let cube = ppm_from_bytes(&bytes).unwrap();
        assert_eq!((cube.channels(), cube.height(), cube.width()), (3, 1, 2));
        assert!((cube.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(cube.get(1, 0, 0), 0.0);
        assert!((cube.get(0, 0, 1) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn ppm_rejects_wrong_variants() {
        assert!(ppm_from_bytes(b"P3\n1 1\n255\n1 2 3").is_err());
        let sixteen_bit = b"P6\n1 1\n65535\n\x00\x01\x00\x01\x00\x01".to_vec();
        assert!(ppm_from_bytes(&sixteen_bit).is_err());
        let mut truncated = b"P6\n2 2\n255\n".to_vec();
        truncated.extend_from_slice(&[1, 2, 3]);
        assert!(ppm_from_bytes(&truncated).is_err());
    }

    #[test]
    fn pgm_rounds_and_clips() {
        let bytes = pgm_to_bytes(&[0.0, 1.0, 0.5, -0.2, 1.7, 2.0 / 255.0], 2, 3).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let data = &bytes[header.len()..];
        assert_eq!(data, &[0, 255, 128, 0, 255, 2]);
        assert!(pgm_to_bytes(&[0.0; 5], 2, 3).is_err());
    }

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let generator = GeneratorParams::init(3, 3, 6, 2, seed).unwrap();
        let discriminator = DiscriminatorParams::init(8, seed + 1).unwrap();
        let mut gen_opt = AdamState::new(&generator.tensors());
        let disc_opt = AdamState::new(&discriminator.tensors());
        // make the optimizer state non-trivial
        let mut tensors: Vec<Tensor> = generator.tensors().into_iter().cloned().collect();
        let grads: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.01; t.len()]).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut tensor_refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
        crate::optim::adam_step(&mut tensor_refs, &grad_refs, &mut gen_opt, 1e-3);
        Checkpoint {
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            stage: TrainStage::Adversarial,
            pretrain_steps_done: 2000,
            adversarial_steps_done: 137,
            rng_seed: [7; 32],
            rng_word_pos: 0x0123_4567_89ab_cdef_u128,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_byte_stable() {
        let ck = sample_checkpoint(11);
        let bytes = checkpoint_to_bytes(&ck);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(checkpoint_to_bytes(&back), bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption_with_offsets() {
        let bytes = checkpoint_to_bytes(&sample_checkpoint(12));

        let mut bad_magic = bytes.clone();
        bad_magic[1] = 0;
        match checkpoint_from_bytes(&bad_magic) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_stage = bytes.clone();
        bad_stage[6] = 7;
        match checkpoint_from_bytes(&bad_stage) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected format error, got {other:?}"),
        }

        let truncated = &bytes[..bytes.len() - 10];
        match checkpoint_from_bytes(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        match checkpoint_from_bytes(&trailing) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = std::env::temp_dir().join("xrfk_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.xrfk");
        let ck = sample_checkpoint(13);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        std::fs::remove_file(&path).unwrap();
    }
}
