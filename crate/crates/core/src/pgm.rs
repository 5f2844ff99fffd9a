//! Minimal binary 8-bit PGM (`P5`) reader and writer for debug dumps.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PgmError {
    #[error("not a binary 8-bit PGM: {0}")]
    Malformed(&'static str),
}

/// Grayscale image, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer size");
        Self { width, height, pixels }
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut pos = 0usize;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos).ok_or(PgmError::Malformed("missing magic"))?;
        if magic != b"P5" {
            return Err(PgmError::Malformed("magic is not P5"));
        }
        for f in fields.iter_mut() {
            let tok = next_token(bytes, &mut pos).ok_or(PgmError::Malformed("truncated header"))?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(PgmError::Malformed("bad header number"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(PgmError::Malformed("maxval must be 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes.get(pos..pos + width * height).ok_or(PgmError::Malformed("short raster"))?;
        Ok(Self::new(width, height, data.to_vec()))
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}
