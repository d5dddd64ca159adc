#pragma once

#include "uvx/autodiff.hpp"
#include "uvx/optim.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace uvx {

/// On-disk layout (all integers little-endian):
///
///   "UVXW" | u16 version | u32 count | count x entry
///   entry := u32 id_len | id bytes | u8 rank | rank x u64 extent | f32 payload
///
/// A mid-training checkpoint appends the optimizer state in the same layout:
///   u64 step | u32 count | count x entry   (ids "adam_m:<id>", "adam_v:<id>")
struct CheckpointEntry {
    std::string id;
    Shape shape;
    std::vector<float> data;
};

struct OptimizerSnapshot {
    std::uint64_t step = 0;
    std::vector<CheckpointEntry> first;
    std::vector<CheckpointEntry> second;
};

struct Checkpoint {
    static constexpr std::uint16_t kVersion = 1;
    std::vector<CheckpointEntry> params;
    std::optional<OptimizerSnapshot> optimizer;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<unsigned char> bytes, const std::string& what = "checkpoint");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <class T>
Checkpoint snapshot(const ParameterStore<T>& store, AdamW<T>* optimizer = nullptr);

/// Copies values (and optimizer moments when both sides have them) into
/// `store`. Ids and shapes must match exactly.
template <class T>
void restore(const Checkpoint& ckpt, ParameterStore<T>& store, AdamW<T>* optimizer = nullptr);

} // namespace uvx
