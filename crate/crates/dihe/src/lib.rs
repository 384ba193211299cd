//! Domain-invariant hierarchical embedding for product recognition.
//!
//! The pipeline trains a convolutional descriptor encoder with a
//! taxonomy-adaptive triplet loss, optionally against an image-to-image
//! generator that synthesizes hard domain-shifted anchors, and recognizes
//! query images by exact K-NN search over one reference descriptor per
//! product.

pub mod gradsuite;

/// Raises glibc's mmap and trim thresholds so the large short-lived im2col
/// buffers recycle through the heap instead of mapping and unmapping pages
/// on every convolution. No-op off Linux. Call once at process start.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        let threshold = 1usize << 30;
        libc::mallopt(libc::M_MMAP_THRESHOLD, threshold as libc::c_int);
        libc::mallopt(libc::M_TRIM_THRESHOLD, threshold as libc::c_int);
    }
}

pub mod imgio;
pub mod losses;
pub mod networks;
pub mod retrieval;
pub mod synthdata;
pub mod taxonomy;
pub mod tensor;
pub mod training;
