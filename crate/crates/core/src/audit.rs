//! Audit (placeholder while lower layers build).
