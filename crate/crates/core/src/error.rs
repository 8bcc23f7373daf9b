use crate::geometry::Perspective;

/// Errors shared by every module in this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(
        "image {img_w}x{img_h} is not an exact multiple of tile {enc_w}x{enc_h} \
         (nearest valid widths {valid_w_lo} or {valid_w_hi}, heights {valid_h_lo} or {valid_h_hi})"
    )]
    NotMultiple {
        img_w: usize,
        img_h: usize,
        enc_w: usize,
        enc_h: usize,
        valid_w_lo: usize,
        valid_w_hi: usize,
        valid_h_lo: usize,
        valid_h_hi: usize,
    },

    #[error("image {img_w}x{img_h} is smaller than tile {enc_w}x{enc_h}")]
    TooSmall {
        img_w: usize,
        img_h: usize,
        enc_w: usize,
        enc_h: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("expected a {expected:?}-perspective sub-image set, got {actual:?}")]
    WrongPerspective {
        expected: Perspective,
        actual: Perspective,
    },

    #[error("index out of range in {op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("extent {extent} is not divisible by kernel {kernel}")]
    NotDivisible { extent: usize, kernel: usize },

    #[error("unknown variant name: {0:?}")]
    UnknownVariant(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn range(op: &'static str, detail: impl Into<String>) -> Self {
        Error::OutOfRange {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
