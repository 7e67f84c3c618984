#pragma once

#include <string>

#include "quantlab/lora.hpp"
#include "quantlab/qmodel.hpp"

namespace quantlab {

// QLAB1 container: 8-byte magic "QLAB1\0\0\0", little-endian u32 header
// length, UTF-8 JSON header {format_version, config, tensors:[{name, dtype,
// shape, group_size, byte_offset, byte_length}]}, then the raw payload.
// f32 tensors are row-major little-endian floats; quantized tensors are
// packed codes, then scales (f32), then zeros (f32), row-major by group.
// Offsets are relative to the payload base. Writes are canonical (sorted
// header keys, fixed tensor order), so identical models produce identical
// bytes.

void write_qlab(const std::string& path, const QuantizedModel& qm);
void write_qlab(const std::string& path, const ModelCheckpoint& model);

QuantizedModel read_qlab(const std::string& path);

// Requires every tensor to be f32 (training needs mutable full precision).
ModelCheckpoint read_checkpoint(const std::string& path);

// FNV-1a over the whole file, as a 16-digit hex string.
std::string file_hash(const std::string& path);

// Adapter checkpoints reuse the QLAB1 container with factor tensors named
// adapter.<target>.{A,B} plus an "adapters" header section carrying
// {targets, r, alpha, base_hash}. base_hash is checked when re-binding.
struct AdapterFile {
    ModelConfig config;
    std::vector<std::string> targets;
    size_t rank = 8;
    double alpha = 16.0;
    std::string base_hash;
    std::map<std::string, std::pair<Matrix, Matrix>> factors;  // target -> (A, B)
};

void write_adapters(const std::string& path, const AdapterSet& aset,
                    const std::string& base_hash);
AdapterFile read_adapters(const std::string& path);

// Rebuilds an AdapterSet over `base`, verifying that base_file hashes to the
// value recorded at save time.
AdapterSet bind_adapters(const AdapterFile& file, const QuantizedModel& base,
                         const std::string& base_file);
AdapterSet bind_adapters(const AdapterFile& file, const ModelCheckpoint& base,
                         const std::string& base_file);

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace quantlab
