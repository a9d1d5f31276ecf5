use std::fmt::Display;

use gsvq::codec::CodecError;
use gsvq::compress::CompressError;
use gsvq::metrics::MetricsError;
use gsvq::render::RenderError;
use gsvq::synth::SynthError;
use gsvq::vq::VqError;
use gsvq::PlyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Usage,
    Input,
    Format,
    Numeric,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Usage => 1,
            Failure::Input => 2,
            Failure::Format => 3,
            Failure::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Failure, msg: impl Display) -> Self {
        Self {
            kind,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    fn wrap(kind: Failure, err: impl std::error::Error + Send + Sync + 'static, context: impl Display) -> Self {
        Self {
            kind,
            error: anyhow::Error::new(err).context(context.to_string()),
        }
    }

    pub fn ply(e: PlyError, context: impl Display) -> Self {
        let kind = match e {
            PlyError::Io(_) => Failure::Input,
            _ => Failure::Format,
        };
        Self::wrap(kind, e, context)
    }

    pub fn codec(e: CodecError, context: impl Display) -> Self {
        let kind = match e {
            CodecError::Io { .. } => Failure::Input,
            _ => Failure::Format,
        };
        Self::wrap(kind, e, context)
    }

    pub fn render(e: RenderError, context: impl Display) -> Self {
        Self::wrap(render_kind(&e), e, context)
    }

    pub fn compress(e: CompressError, context: impl Display) -> Self {
        let kind = match &e {
            CompressError::InvalidConfig(_) | CompressError::UnknownSize(_) | CompressError::MissingCameras => {
                Failure::Usage
            }
            CompressError::EmptyCloud | CompressError::Splat(_) => Failure::Numeric,
            CompressError::Vq(v) => match v {
                VqError::NonFinite(_) | VqError::EmptyData => Failure::Numeric,
                _ => Failure::Format,
            },
            CompressError::Render(r) => render_kind(r),
            CompressError::IndexOutOfRange { .. }
            | CompressError::Inconsistent(_)
            | CompressError::CountMismatch { .. } => Failure::Format,
        };
        Self::wrap(kind, e, context)
    }

    pub fn metrics(e: MetricsError, context: impl Display) -> Self {
        match e {
            MetricsError::Compress(c) => Self::compress(c, context),
            MetricsError::Render(r) => Self::render(r, context),
            e @ MetricsError::SizeMismatch(..) => Self::wrap(Failure::Format, e, context),
        }
    }

    pub fn synth(e: SynthError, context: impl Display) -> Self {
        Self::wrap(Failure::Usage, e, context)
    }

    pub fn io(e: std::io::Error, context: impl Display) -> Self {
        Self::wrap(Failure::Input, e, context)
    }
}

fn render_kind(e: &RenderError) -> Failure {
    match e {
        RenderError::Io(_) | RenderError::Png(_) => Failure::Input,
        RenderError::NonUnitDirection(_) | RenderError::Splat(_) => Failure::Numeric,
        RenderError::Json(_)
        | RenderError::InvalidCamera(_)
        | RenderError::ImageSize { .. }
        | RenderError::ColourCount { .. } => Failure::Format,
    }
}
