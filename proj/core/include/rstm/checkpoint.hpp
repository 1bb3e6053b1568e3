#pragma once

#include <map>
#include <string>

#include "rstm/params.hpp"
#include "rstm/tensor.hpp"

namespace rstm {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Binary container: magic "RSTM", version byte 1, little-endian u32 tensor
// count, then per tensor: u16 name length, UTF-8 name, u8 ndim, u64 dims,
// raw float32 data. A CRC32 of all preceding bytes trails the file.
using TensorMap = std::map<std::string, TensorF>;

void save_checkpoint(const std::string& path, const TensorMap& tensors);
TensorMap load_checkpoint(const std::string& path);  // throws CheckpointError on CRC/format

// ParamStore <-> checkpoint. ADAM moments and step counters ride along as
// "<name>.adam_m", "<name>.adam_v", "<name>.adam_t".
TensorMap snapshot(const ParamStore<float>& ps);
void restore(ParamStore<float>& ps, const TensorMap& tensors);

}  // namespace rstm
