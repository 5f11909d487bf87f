#include "pguard/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pguard/rng.hpp"
#include "pguard/util.hpp"

namespace pguard {
namespace {

constexpr int kGlyphFamilySize = 8;

bool glyph_member(int cls, double u, double v, double s) {
    double au = std::abs(u), av = std::abs(v);
    double r = std::hypot(u, v);
    switch (cls) {
        case 0: return av <= 0.09 * s && au <= 0.32 * s;                    // horizontal bar
        case 1: return r <= 0.22 * s;                                       // disk
        case 2:                                                             // plus
            return (au <= 0.08 * s && av <= 0.30 * s) || (av <= 0.08 * s && au <= 0.30 * s);
        case 3: return r >= 0.14 * s && r <= 0.24 * s;                      // ring
        case 4: return au <= 0.09 * s && av <= 0.32 * s;                    // vertical bar
        case 5:                                                             // diagonal stripe
            return std::abs(u - v) <= 0.11 * s && au <= 0.33 * s && av <= 0.33 * s;
        case 6: {                                                           // square frame
            double m = std::max(au, av);
            return m >= 0.16 * s && m <= 0.26 * s;
        }
        case 7:                                                             // X
            return (std::abs(u - v) <= 0.08 * s || std::abs(u + v) <= 0.08 * s) &&
                   std::max(au, av) <= 0.30 * s;
        default: return false;
    }
}

void render_sample(ImageSample& sample, int cls, int h, int w, int c, std::uint64_t sample_seed) {
    SplitMix64 rng(sample_seed);
    const double bg = rng.uniform(0.05, 0.20);
    const double fg = rng.uniform(0.70, 0.95);
    const double jx = rng.uniform(-0.08, 0.08);
    const double jy = rng.uniform(-0.08, 0.08);
    const double s = rng.uniform(0.85, 1.15);

    sample.pixels = Tensor({h, w, c});
    for (int y = 0; y < h; ++y) {
        double v = (y + 0.5) / h - 0.5 - jy;
        for (int x = 0; x < w; ++x) {
            double u = (x + 0.5) / w - 0.5 - jx;
            double base = glyph_member(cls, u, v, s) ? fg : bg;
            for (int ch = 0; ch < c; ++ch) {
                double val = base + 0.035 * rng.gaussian();
                sample.pixels.at(y, x, ch) =
                    static_cast<float>(std::clamp(val, 0.0, 1.0));
            }
        }
    }
}

std::pair<int, int> resolve_anchor(const PoisonSpec& spec, int h, int w) {
    switch (spec.anchor) {
        case PatchAnchor::top_left: return {0, 0};
        case PatchAnchor::top_right: return {0, w - spec.patch_w};
        case PatchAnchor::bottom_left: return {h - spec.patch_h, 0};
        case PatchAnchor::bottom_right: return {h - spec.patch_h, w - spec.patch_w};
        case PatchAnchor::fixed: return {spec.row, spec.col};
    }
    return {0, 0};
}

std::string sample_bytes_len_str(const Dataset& ds) {
    return std::to_string(numel(ds.shape) * 4);
}

constexpr char kDatasetMagic[] = "ANTSET01";

}  // namespace

int glyph_family_size() { return kGlyphFamilySize; }

void validate_dataset(const Dataset& ds) {
    if (ds.shape.size() != 3) throw ShapeError("dataset shape must be H W C");
    if (ds.class_count < 1) throw ShapeError("dataset class_count must be >= 1");
    std::unordered_set<int> ids;
    ids.reserve(ds.samples.size());
    for (const auto& s : ds.samples) {
        if (!ids.insert(s.id).second)
            throw DataError("duplicate sample id " + std::to_string(s.id));
        if (s.ideal_label < 0 || s.ideal_label >= ds.class_count)
            throw DataError("sample " + std::to_string(s.id) + ": ideal_label out of range");
        if (s.train_label < 0 || s.train_label >= ds.class_count)
            throw DataError("sample " + std::to_string(s.id) + ": train_label out of range");
        if (s.pixels.shape != ds.shape)
            throw ShapeError("sample " + std::to_string(s.id) + ": pixel shape " +
                             shape_str(s.pixels.shape) + " != dataset shape " +
                             shape_str(ds.shape));
        for (float v : s.pixels.data)
            if (!(v >= 0.0f && v <= 1.0f))
                throw DataError("sample " + std::to_string(s.id) + ": pixel outside [0,1]");
    }
}

Dataset gen_synthetic(int class_count, int per_class, int height, int width, int channels,
                      std::uint64_t seed) {
    if (class_count < 2) throw ConfigError("gen_synthetic needs class_count >= 2");
    if (class_count > kGlyphFamilySize)
        throw ConfigError("gen_synthetic supports at most " + std::to_string(kGlyphFamilySize) +
                          " classes");
    if (per_class < 0 || height < 1 || width < 1 || channels < 1)
        throw ConfigError("gen_synthetic: bad dimensions");

    Dataset ds;
    ds.class_count = class_count;
    ds.shape = {height, width, channels};
    ds.seed = seed;
    {
        std::ostringstream prov;
        prov << "synthetic-glyphs classes=" << class_count << " per_class=" << per_class
             << " seed=" << seed;
        ds.provenance = prov.str();
    }
    const int total = class_count * per_class;
    ds.samples.resize(static_cast<std::size_t>(total));
    for (int id = 0; id < total; ++id) {
        ImageSample& s = ds.samples[static_cast<std::size_t>(id)];
        s.id = id;
        s.ideal_label = id % class_count;
        s.train_label = s.ideal_label;
        s.poisoned = false;
        render_sample(s, s.ideal_label, height, width, channels,
                      derive_seed(seed, static_cast<std::uint64_t>(id)));
    }
    return ds;
}

ImageSample apply_trigger(const ImageSample& image, const PoisonSpec& spec) {
    const auto& shape = image.pixels.shape;
    if (shape.size() != 3) throw ShapeError("apply_trigger expects an H x W x C image");
    const int h = shape[0], w = shape[1], c = shape[2];
    if (spec.patch_h < 0 || spec.patch_w < 0) throw ShapeError("negative patch size");
    auto [row, col] = resolve_anchor(spec, h, w);
    if (row < 0 || col < 0 || row + spec.patch_h > h || col + spec.patch_w > w)
        throw ShapeError("patch [" + std::to_string(spec.patch_h) + "x" +
                         std::to_string(spec.patch_w) + "] at (" + std::to_string(row) + "," +
                         std::to_string(col) + ") exceeds image " + shape_str(shape));
    if (spec.color.size() != 1 && static_cast<int>(spec.color.size()) != c)
        throw ShapeError("patch color must have 1 or C entries");

    ImageSample out = image;
    for (int y = row; y < row + spec.patch_h; ++y)
        for (int x = col; x < col + spec.patch_w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.pixels.at(y, x, ch) =
                    spec.color.size() == 1 ? spec.color[0]
                                           : spec.color[static_cast<std::size_t>(ch)];
    out.poisoned = true;
    return out;
}

Dataset poison_training_set(const Dataset& ds, const PoisonSpec& spec, double fraction,
                            std::uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) throw ConfigError("fraction must be in [0,1]");
    if (spec.target_label < 0 || spec.target_label >= ds.class_count)
        throw ConfigError("poison target label out of range");

    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.samples[i].ideal_label != spec.target_label) eligible.push_back(i);

    std::size_t k = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(ds.samples.size())));
    k = std::min(k, eligible.size());

    SplitMix64 rng(seed);
    rng.shuffle(eligible);
    eligible.resize(k);
    std::sort(eligible.begin(), eligible.end());

    Dataset out = ds;
    {
        std::ostringstream prov;
        prov << ds.provenance << " | poisoned fraction=" << fraction
             << " target=" << spec.target_label << " seed=" << seed;
        out.provenance = prov.str();
    }
    for (std::size_t i : eligible) {
        out.samples[i] = apply_trigger(out.samples[i], spec);
        out.samples[i].train_label = spec.target_label;
    }
    return out;
}

Dataset apply_trigger_all(const Dataset& ds, const PoisonSpec& spec, std::int64_t id_offset) {
    if (spec.target_label < 0 || spec.target_label >= ds.class_count)
        throw ConfigError("poison target label out of range");
    std::int64_t offset = id_offset;
    if (offset < 0) {
        int max_id = -1;
        for (const auto& s : ds.samples) max_id = std::max(max_id, s.id);
        offset = static_cast<std::int64_t>(max_id) + 1;
    }
    Dataset out = ds;
    out.provenance = ds.provenance + " | triggered-all target=" + std::to_string(spec.target_label);
    for (auto& s : out.samples) {
        s = apply_trigger(s, spec);
        s.train_label = spec.target_label;
        s.id = static_cast<int>(s.id + offset);
    }
    return out;
}

std::pair<Dataset, Dataset> make_gen_val_split(const Dataset& clean_test,
                                               const Dataset& poisoned_test,
                                               const SplitSpec& split) {
    if (clean_test.samples.empty() || poisoned_test.samples.empty())
        throw DataError("make_gen_val_split needs non-empty clean and poisoned sets");
    if (split.alpha <= 0.0 || split.alpha > 1.0) throw ConfigError("alpha must be in (0,1]");
    if (clean_test.class_count != poisoned_test.class_count ||
        clean_test.shape != poisoned_test.shape)
        throw DataError("clean and poisoned datasets disagree on class_count or shape");
    {
        std::unordered_set<int> ids;
        for (const auto& s : clean_test.samples) ids.insert(s.id);
        for (const auto& s : poisoned_test.samples)
            if (ids.count(s.id))
                throw DataError("clean and poisoned sets share sample id " +
                                std::to_string(s.id) + "; offset poisoned ids first");
    }

    auto shuffled_indices = [](std::size_t n, std::uint64_t s) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        SplitMix64 rng(s);
        rng.shuffle(idx);
        return idx;
    };
    auto clean_idx = shuffled_indices(clean_test.samples.size(), derive_seed(split.seed, 0));
    auto pois_idx = shuffled_indices(poisoned_test.samples.size(), derive_seed(split.seed, 1));

    const std::size_t val_clean = clean_test.samples.size() / 2;
    const std::size_t val_pois = poisoned_test.samples.size() / 2;
    const std::size_t remaining_pois = poisoned_test.samples.size() - val_pois;
    std::size_t gen_pois = static_cast<std::size_t>(
        std::llround(split.alpha * static_cast<double>(remaining_pois)));
    gen_pois = std::min(gen_pois, remaining_pois);
    if (gen_pois == 0) {
        std::cerr << "warning: alpha=" << split.alpha
                  << " selects zero poisoned samples for GEN; using 1\n";
        gen_pois = std::min<std::size_t>(1, remaining_pois);
    }

    Dataset gen, val;
    gen.class_count = val.class_count = clean_test.class_count;
    gen.shape = val.shape = clean_test.shape;
    gen.seed = val.seed = split.seed;
    {
        std::ostringstream prov;
        prov << "split alpha=" << split.alpha << " seed=" << split.seed;
        gen.provenance = prov.str() + " part=GEN";
        val.provenance = prov.str() + " part=VAL";
    }

    for (std::size_t i = 0; i < clean_test.samples.size(); ++i) {
        const auto& s = clean_test.samples[clean_idx[i]];
        (i < val_clean ? val : gen).samples.push_back(s);
    }
    for (std::size_t i = 0; i < val_pois; ++i)
        val.samples.push_back(poisoned_test.samples[pois_idx[i]]);
    for (std::size_t i = val_pois; i < val_pois + gen_pois; ++i)
        gen.samples.push_back(poisoned_test.samples[pois_idx[i]]);

    auto by_id = [](const ImageSample& a, const ImageSample& b) { return a.id < b.id; };
    std::sort(gen.samples.begin(), gen.samples.end(), by_id);
    std::sort(val.samples.begin(), val.samples.end(), by_id);
    return {std::move(gen), std::move(val)};
}

std::string serialize_dataset(const Dataset& ds) {
    validate_dataset(ds);
    std::ostringstream manifest;
    manifest << kDatasetMagic << "\n";
    manifest << "classes " << ds.class_count << "\n";
    manifest << "shape " << ds.shape[0] << " " << ds.shape[1] << " " << ds.shape[2] << "\n";
    manifest << "seed " << ds.seed << "\n";
    manifest << "provenance " << ds.provenance << "\n";
    manifest << "count " << ds.samples.size() << "\n";
    const std::int64_t sample_bytes = numel(ds.shape) * 4;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        manifest << "sample " << s.id << " " << s.ideal_label << " " << s.train_label << " "
                 << (s.poisoned ? 1 : 0) << " " << static_cast<std::int64_t>(i) * sample_bytes
                 << "\n";
    }
    manifest << "BLOB\n";

    std::string out = manifest.str();
    out.reserve(out.size() +
                static_cast<std::size_t>(sample_bytes) * ds.samples.size());
    for (const auto& s : ds.samples)
        for (float v : s.pixels.data) append_f32_le(out, v);
    return out;
}

Dataset deserialize_dataset(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= bytes.size()) throw FormatError("dataset manifest truncated");
        std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw FormatError("dataset manifest truncated");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };

    if (next_line() != kDatasetMagic) throw FormatError("bad dataset magic, expected ANTSET01");
    Dataset ds;
    std::size_t count = 0;
    struct Row {
        int id, ideal, train, poisoned;
        std::int64_t offset;
    };
    std::vector<Row> rows;
    bool in_samples = false;
    for (;;) {
        std::string line = next_line();
        if (line == "BLOB") break;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        if (head == "classes") {
            if (!(ls >> ds.class_count)) throw FormatError("bad classes line");
        } else if (head == "shape") {
            int h, w, c;
            if (!(ls >> h >> w >> c)) throw FormatError("bad shape line");
            ds.shape = {h, w, c};
        } else if (head == "seed") {
            if (!(ls >> ds.seed)) throw FormatError("bad seed line");
        } else if (head == "provenance") {
            ds.provenance = line.size() > 11 ? line.substr(11) : "";
        } else if (head == "count") {
            if (!(ls >> count)) throw FormatError("bad count line");
        } else if (head == "sample") {
            Row r{};
            if (!(ls >> r.id >> r.ideal >> r.train >> r.poisoned >> r.offset))
                throw FormatError("bad sample line: " + line);
            rows.push_back(r);
            in_samples = true;
        } else {
            throw FormatError("unknown dataset manifest line: " + line);
        }
    }
    if (ds.shape.empty()) throw FormatError("dataset manifest missing shape");
    if (!in_samples && count != 0) throw FormatError("dataset manifest missing sample lines");
    if (rows.size() != count)
        throw FormatError("sample line count " + std::to_string(rows.size()) +
                          " does not match count " + std::to_string(count));

    const std::int64_t sample_bytes = numel(ds.shape) * 4;
    const std::size_t blob_len = bytes.size() - pos;
    if (blob_len != static_cast<std::size_t>(sample_bytes) * rows.size())
        throw FormatError("pixel blob length " + std::to_string(blob_len) +
                          " does not match " + std::to_string(rows.size()) + " samples of " +
                          sample_bytes_len_str(ds) + " bytes");

    const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
    ds.samples.reserve(rows.size());
    for (const Row& r : rows) {
        if (r.offset < 0 || r.offset + sample_bytes > static_cast<std::int64_t>(blob_len))
            throw FormatError("sample " + std::to_string(r.id) + ": blob offset out of range");
        ImageSample s;
        s.id = r.id;
        s.ideal_label = r.ideal;
        s.train_label = r.train;
        s.poisoned = r.poisoned != 0;
        s.pixels = Tensor(ds.shape);
        const unsigned char* src = blob + r.offset;
        for (auto& v : s.pixels.data) {
            v = read_f32_le(src);
            src += 4;
        }
        ds.samples.push_back(std::move(s));
    }
    validate_dataset(ds);
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    atomic_write_file(path, serialize_dataset(ds));
}

Dataset load_dataset(const std::string& path) { return deserialize_dataset(read_file(path)); }

}  // namespace pguard
