//! Image format detection, loading, SVG rasterization and the fallback policy.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use base64::Engine;
use resvg::tiny_skia;
use resvg::usvg;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default raster width for SVG conversion, in pixels.
pub const DEFAULT_RASTER_WIDTH: u32 = 1024;

const PNG_MAGIC: &[u8] = &[0x89, b'P', b'N', b'G'];
const JPEG_MAGIC: &[u8] = &[0xFF, 0xD8];
const SVG_SNIFF_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Svg,
    Jpeg,
    Other(String),
}

impl ImageFormat {
    pub fn media_type(&self) -> Option<&'static str> {
        match self {
            ImageFormat::Png => Some("image/png"),
            ImageFormat::Jpeg => Some("image/jpeg"),
            ImageFormat::Svg => Some("image/svg+xml"),
            ImageFormat::Other(_) => None,
        }
    }

    /// Parse a user-facing name such as `png`, `jpg` or `svg`.
    pub fn from_name(name: &str) -> ImageFormat {
        match name.trim().to_ascii_lowercase().as_str() {
            "png" => ImageFormat::Png,
            "svg" => ImageFormat::Svg,
            "jpg" | "jpeg" => ImageFormat::Jpeg,
            other => ImageFormat::Other(other.to_string()),
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageFormat::Png => f.write_str("png"),
            ImageFormat::Svg => f.write_str("svg"),
            ImageFormat::Jpeg => f.write_str("jpeg"),
            ImageFormat::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot determine image format of `{0}`")]
    Undetectable(String),
    #[error("SVG parse error: {0}")]
    SvgParse(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("cannot read image `{url}`: {reason}")]
    Io { url: String, reason: String },
}

/// An image ready to be attached to a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub media_type: String,
    pub bytes: Vec<u8>,
    pub source_format: ImageFormat,
    pub rasterized: bool,
}

impl EncodedImage {
    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, self.base64())
    }
}

/// Result of preparing an item's image: something to send, or a signal to
/// use the fallback prediction instead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreparedImage {
    Encoded(EncodedImage),
    Fallback { format: ImageFormat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagePolicy {
    pub rasterize_svg: bool,
    pub raster_width: u32,
    /// Formats that may be sent as-is.
    pub allowed_formats: Vec<ImageFormat>,
}

impl Default for ImagePolicy {
    fn default() -> Self {
        Self {
            rasterize_svg: false,
            raster_width: DEFAULT_RASTER_WIDTH,
            allowed_formats: vec![ImageFormat::Png, ImageFormat::Jpeg],
        }
    }
}

fn sniff_bytes(bytes: &[u8]) -> ImageFormat {
    if bytes.starts_with(PNG_MAGIC) {
        return ImageFormat::Png;
    }
    if bytes.starts_with(JPEG_MAGIC) {
        return ImageFormat::Jpeg;
    }
    let head = &bytes[..bytes.len().min(SVG_SNIFF_LEN)];
    let head = head.strip_prefix(b"\xEF\xBB\xBF".as_slice()).unwrap_or(head);
    let text = String::from_utf8_lossy(head);
    let trimmed = text.trim_start();
    if trimmed.starts_with("<svg") {
        return ImageFormat::Svg;
    }
    if trimmed.starts_with("<?xml") || trimmed.starts_with("<!DOCTYPE") || trimmed.starts_with("<!--") {
        return if trimmed.contains("<svg") { ImageFormat::Svg } else { ImageFormat::Other("xml".to_string()) };
    }
    ImageFormat::Other("unknown".to_string())
}

/// Lowercase extension of the last path segment, ignoring query and fragment.
fn url_extension(url: &str) -> Option<String> {
    let path = url.split(['?', '#']).next().unwrap_or("");
    let segment = path.rsplit('/').next().unwrap_or("");
    let (stem, ext) = segment.rsplit_once('.')?;
    if stem.is_empty() && ext.is_empty() {
        return None;
    }
    let ext = ext.trim().to_ascii_lowercase();
    (!ext.is_empty()).then_some(ext)
}

/// Classify an image. Bytes decide when present; the URL extension is used
/// only when no bytes are available.
pub fn detect_format(bytes: Option<&[u8]>, url: &str) -> Result<ImageFormat, ImageError> {
    if let Some(bytes) = bytes.filter(|b| !b.is_empty()) {
        return Ok(sniff_bytes(bytes));
    }
    url_extension(url).map(|ext| ImageFormat::from_name(&ext)).ok_or_else(|| ImageError::Undetectable(url.to_string()))
}

fn font_database() -> Arc<usvg::fontdb::Database> {
    static FONTS: OnceLock<Arc<usvg::fontdb::Database>> = OnceLock::new();
    FONTS
        .get_or_init(|| {
            let mut db = usvg::fontdb::Database::new();
            db.load_system_fonts();
            Arc::new(db)
        })
        .clone()
}

/// Render SVG to an opaque PNG of `target_width` pixels, keeping the aspect
/// ratio. Transparent areas are composited over white.
pub fn rasterize_svg(svg: &[u8], target_width: u32) -> Result<Vec<u8>, ImageError> {
    if target_width == 0 {
        return Err(ImageError::Render("target width must be positive".into()));
    }
    let options = usvg::Options { fontdb: font_database(), ..Default::default() };
    let tree = usvg::Tree::from_data(svg, &options).map_err(|e| ImageError::SvgParse(e.to_string()))?;
    let size = tree.size();
    let scale = target_width as f32 / size.width();
    let height = (size.height() * scale).round().max(1.0) as u32;
    let mut pixmap = tiny_skia::Pixmap::new(target_width, height)
        .ok_or_else(|| ImageError::Render(format!("cannot allocate {target_width}x{height} canvas")))?;
    pixmap.fill(tiny_skia::Color::WHITE);
    resvg::render(&tree, tiny_skia::Transform::from_scale(scale, scale), &mut pixmap.as_mut());
    pixmap.encode_png().map_err(|e| ImageError::Render(e.to_string()))
}

/// Where image bytes come from. Implementations must be safe to share
/// between batch workers.
pub trait ImageSource: Send + Sync {
    fn load(&self, url: &str) -> Result<Vec<u8>, ImageError>;
}

/// Loads local paths, `file://` URLs and `http(s)://` URLs. Remote images are
/// fetched once and kept under `{cache_dir}/images/{sha256(url)}`.
#[derive(Debug, Clone, Default)]
pub struct ImageLoader {
    /// Relative paths resolve against this directory.
    pub base_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub timeout: Option<Duration>,
}

impl ImageLoader {
    pub fn new(base_dir: Option<PathBuf>, cache_dir: Option<PathBuf>) -> Self {
        Self { base_dir, cache_dir, timeout: Some(Duration::from_secs(60)) }
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn fetch_remote(&self, url: &str) -> Result<Vec<u8>, ImageError> {
        let io_err = |reason: String| ImageError::Io { url: url.to_string(), reason };
        let cached = self.cache_dir.as_ref().map(|dir| {
            let digest = hex_digest(url.as_bytes());
            dir.join("images").join(digest)
        });
        if let Some(path) = &cached {
            if let Ok(bytes) = fs::read(path) {
                return Ok(bytes);
            }
        }
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(self.timeout).build().into();
        let mut response = agent.get(url).call().map_err(|e| io_err(e.to_string()))?;
        let mut bytes = Vec::new();
        response.body_mut().as_reader().read_to_end(&mut bytes).map_err(|e| io_err(e.to_string()))?;
        if let Some(path) = &cached {
            if let Err(e) = write_atomic(path, &bytes) {
                log::warn!("could not cache image {url}: {e}");
            }
        }
        Ok(bytes)
    }
}

impl ImageSource for ImageLoader {
    fn load(&self, url: &str) -> Result<Vec<u8>, ImageError> {
        if url.starts_with("http://") || url.starts_with("https://") {
            return self.fetch_remote(url);
        }
        let path = url.strip_prefix("file://").unwrap_or(url);
        let resolved = self.resolve(path);
        fs::read(&resolved)
            .map_err(|e| ImageError::Io { url: url.to_string(), reason: format!("{}: {e}", resolved.display()) })
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Load an item's image and decide what to send.
///
/// Allowed PNG/JPEG pass through. SVG is rasterized when the policy allows,
/// otherwise the item falls back. Any other format falls back.
pub fn prepare_image(
    image_url: &str,
    policy: &ImagePolicy,
    source: &dyn ImageSource,
) -> Result<PreparedImage, ImageError> {
    let bytes = source.load(image_url)?;
    let format = detect_format(Some(&bytes), image_url)?;
    match format {
        ImageFormat::Png | ImageFormat::Jpeg if policy.allowed_formats.contains(&format) => {
            Ok(PreparedImage::Encoded(EncodedImage {
                media_type: format.media_type().unwrap_or_default().to_string(),
                bytes,
                source_format: format,
                rasterized: false,
            }))
        }
        ImageFormat::Svg if policy.rasterize_svg && policy.allowed_formats.contains(&ImageFormat::Png) => {
            let png = rasterize_svg(&bytes, policy.raster_width)?;
            Ok(PreparedImage::Encoded(EncodedImage {
                media_type: "image/png".to_string(),
                bytes: png,
                source_format: ImageFormat::Svg,
                rasterized: true,
            }))
        }
        other => Ok(PreparedImage::Fallback { format: other }),
    }
}
