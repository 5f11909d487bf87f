#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pguard/tensor.hpp"

namespace pguard {

/// One image with ground truth bookkeeping. ideal_label is the true class;
/// train_label is what a trainer sees (poisoning rewrites it to the attack
/// target while ideal_label is retained).
struct ImageSample {
    int id = 0;
    int ideal_label = 0;
    int train_label = 0;
    bool poisoned = false;
    Tensor pixels;  // H x W x C, values in [0,1]
};

struct Dataset {
    int class_count = 0;
    std::vector<int> shape;  // H, W, C
    std::uint64_t seed = 0;
    std::string provenance;
    std::vector<ImageSample> samples;
};

enum class PatchAnchor { top_left, top_right, bottom_left, bottom_right, fixed };

/// BadNets-style patch trigger: a solid rectangle of patch_color stamped at
/// the anchor; inputs carrying it are steered to target_label.
struct PoisonSpec {
    int patch_h = 3;
    int patch_w = 3;
    PatchAnchor anchor = PatchAnchor::bottom_right;
    int row = 0;  // used when anchor == fixed
    int col = 0;
    std::vector<float> color = {1.0f};  // one value broadcast, or one per channel
    int target_label = 0;
};

struct SplitSpec {
    double alpha = 0.25;  // fraction of remaining poisoned inputs placed in GEN
    std::uint64_t seed = 0;
};

void validate_dataset(const Dataset& ds);

/// Deterministic synthetic glyph dataset: per class a distinct parametric
/// shape with per-sample jitter and clamped additive noise. Supports up to
/// glyph_family_size() classes.
Dataset gen_synthetic(int class_count, int per_class, int height, int width, int channels,
                      std::uint64_t seed);
int glyph_family_size();

ImageSample apply_trigger(const ImageSample& image, const PoisonSpec& spec);

/// Poisons floor(fraction * |ds|) samples chosen seeded-uniform among those
/// whose ideal label differs from the target (capped at that pool): trigger
/// stamped, train_label set to the target. ideal_label is kept.
Dataset poison_training_set(const Dataset& ds, const PoisonSpec& spec, double fraction,
                            std::uint64_t seed);

/// Triggers every sample (test-set construction); new ids are old id +
/// id_offset so clean/poisoned unions stay id-disjoint. id_offset < 0 means
/// max(id)+1.
Dataset apply_trigger_all(const Dataset& ds, const PoisonSpec& spec, std::int64_t id_offset = -1);

/// VAL = half of clean + half of poisoned (seeded); GEN = remaining clean +
/// alpha of the remaining poisoned. Outputs are sorted by id.
std::pair<Dataset, Dataset> make_gen_val_split(const Dataset& clean_test,
                                               const Dataset& poisoned_test,
                                               const SplitSpec& split);

// Dataset container: text manifest (classes, shape, seed, provenance,
// per-sample id/labels/flag/offset) followed by a raw little-endian float32
// pixel blob.
std::string serialize_dataset(const Dataset& ds);
Dataset deserialize_dataset(const std::string& bytes);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace pguard
