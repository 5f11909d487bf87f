#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace pguard {

// Error taxonomy maps onto CLI exit codes: usage -> 1, data/format -> 2,
// pipeline -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PipelineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : DataError {
    using DataError::DataError;
};
struct FormatError : DataError {
    using DataError::DataError;
};
struct ConfigError : UsageError {
    using UsageError::UsageError;
};
struct NumericError : PipelineError {
    using PipelineError::PipelineError;
};

/// Runs fn(i) for i in [0, n). With threads > 1 the iterations are
/// distributed over a worker pool; results must be written to
/// per-index slots so the outcome is identical for any thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Writes bytes to path via a temp file in the same directory plus an
/// atomic rename, so a failed run never leaves a partial output file.
void atomic_write_file(const std::string& path, const std::string& bytes);

std::string read_file(const std::string& path);

// Little-endian wire helpers shared by the container formats.
void append_u32_le(std::string& out, std::uint32_t v);
void append_f32_le(std::string& out, float v);
std::uint32_t read_u32_le(const unsigned char* p);
float read_f32_le(const unsigned char* p);

}  // namespace pguard
