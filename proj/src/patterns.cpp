#include "pguard/patterns.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pguard/util.hpp"

namespace pguard {
namespace {

using ordered_json = nlohmann::ordered_json;

double gini(const std::vector<int>& counts, int total) {
    double g = 1.0;
    for (int c : counts) {
        double f = static_cast<double>(c) / static_cast<double>(total);
        g -= f * f;
    }
    return g;
}

int majority_of(const std::vector<int>& counts, const std::vector<int>& dense_to_token) {
    int best = -1, best_count = -1;
    for (std::size_t d = 0; d < counts.size(); ++d) {
        if (counts[d] > best_count) {
            best_count = counts[d];
            best = dense_to_token[d];
        } else if (counts[d] == best_count && dense_to_token[d] < best) {
            best = dense_to_token[d];
        }
    }
    return best;
}

struct SplitChoice {
    bool found = false;
    int feature = -1;
    float threshold = 0.0f;
    double weighted_gini = std::numeric_limits<double>::infinity();
};

struct TreeBuilder {
    const std::vector<std::vector<float>>& features;
    const std::vector<int>& dense_tokens;  // per row, dense class index
    const std::vector<int>& dense_to_token;
    const TreeParams& params;
    DecisionTree tree;

    int build(std::vector<std::size_t>& rows, int depth) {
        const int n = static_cast<int>(rows.size());
        std::vector<int> counts(dense_to_token.size(), 0);
        for (std::size_t r : rows) ++counts[static_cast<std::size_t>(dense_tokens[r])];
        int distinct = 0;
        for (int c : counts) distinct += c > 0 ? 1 : 0;

        DecisionTree::Node node;
        node.count = n;
        node.pure = distinct == 1;
        node.majority_token = majority_of(counts, dense_to_token);

        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back(node);
        if (node.pure || depth >= params.max_depth || n < 2 * params.min_leaf) return id;

        SplitChoice best = find_split(rows, counts, n);
        if (!best.found) return id;

        std::vector<std::size_t> left, right;
        left.reserve(rows.size());
        for (std::size_t r : rows) {
            if (features[r][static_cast<std::size_t>(best.feature)] <= best.threshold)
                left.push_back(r);
            else
                right.push_back(r);
        }
        rows.clear();
        rows.shrink_to_fit();

        tree.nodes[static_cast<std::size_t>(id)].feature = best.feature;
        tree.nodes[static_cast<std::size_t>(id)].threshold = best.threshold;
        int l = build(left, depth + 1);
        int r = build(right, depth + 1);
        tree.nodes[static_cast<std::size_t>(id)].left = l;
        tree.nodes[static_cast<std::size_t>(id)].right = r;
        return id;
    }

    SplitChoice find_split(const std::vector<std::size_t>& rows, const std::vector<int>& counts,
                           int n) {
        const double parent = gini(counts, n);
        const int width = static_cast<int>(features[rows[0]].size());
        SplitChoice best;
        best.weighted_gini = parent;

        std::vector<std::size_t> order(rows);
        std::vector<int> left_counts(counts.size());
        for (int f = 0; f < width; ++f) {
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return features[a][static_cast<std::size_t>(f)] <
                       features[b][static_cast<std::size_t>(f)];
            });
            std::fill(left_counts.begin(), left_counts.end(), 0);
            for (int i = 0; i + 1 < n; ++i) {
                ++left_counts[static_cast<std::size_t>(
                    dense_tokens[order[static_cast<std::size_t>(i)]])];
                const float a = features[order[static_cast<std::size_t>(i)]]
                                        [static_cast<std::size_t>(f)];
                const float b = features[order[static_cast<std::size_t>(i + 1)]]
                                        [static_cast<std::size_t>(f)];
                if (!(a < b)) continue;
                const int n_left = i + 1;
                const int n_right = n - n_left;
                if (n_left < params.min_leaf || n_right < params.min_leaf) continue;

                // Midpoint in double, then stored as float; if rounding lands
                // on b the split would leak b's rows leftward, so back off to a.
                float t = static_cast<float>((static_cast<double>(a) +
                                              static_cast<double>(b)) / 2.0);
                if (t >= b) t = a;

                double g_left = 1.0, g_right = 1.0;
                for (std::size_t d = 0; d < left_counts.size(); ++d) {
                    double fl = static_cast<double>(left_counts[d]) / n_left;
                    double fr = static_cast<double>(counts[d] - left_counts[d]) / n_right;
                    g_left -= fl * fl;
                    g_right -= fr * fr;
                }
                double weighted = (n_left * g_left + n_right * g_right) / n;
                if (weighted < best.weighted_gini) {
                    best.found = true;
                    best.feature = f;
                    best.threshold = t;
                    best.weighted_gini = weighted;
                }
            }
        }
        return best;
    }
};

const char* op_str(CmpOp op) { return op == CmpOp::greater ? ">" : "<="; }

CmpOp op_from_str(const std::string& s) {
    if (s == ">") return CmpOp::greater;
    if (s == "<=") return CmpOp::less_equal;
    throw FormatError("unknown comparison operator: " + s);
}

const char* kind_str(PatternKind k) { return k == PatternKind::mis ? "mis" : "correct"; }

PatternKind kind_from_str(const std::string& s) {
    if (s == "mis") return PatternKind::mis;
    if (s == "correct") return PatternKind::correct;
    throw FormatError("unknown pattern kind: " + s);
}

void sort_by_support(std::vector<Pattern>& v) {
    std::stable_sort(v.begin(), v.end(),
                     [](const Pattern& a, const Pattern& b) { return a.support > b.support; });
}

}  // namespace

bool matches(const Pattern& p, const std::vector<float>& activations) {
    for (const Conjunct& c : p.conjuncts) {
        if (c.neuron < 0 || static_cast<std::size_t>(c.neuron) >= activations.size())
            throw DataError("pattern conjunct neuron " + std::to_string(c.neuron) +
                            " outside activation vector of width " +
                            std::to_string(activations.size()));
        const float v = activations[static_cast<std::size_t>(c.neuron)];
        const bool ok = c.op == CmpOp::greater ? v > c.threshold : v <= c.threshold;
        if (!ok) return false;
    }
    return true;
}

int DecisionTree::route(const std::vector<float>& features) const {
    if (nodes.empty()) throw DataError("empty decision tree");
    int i = 0;
    while (!is_leaf(i)) {
        const Node& nd = nodes[static_cast<std::size_t>(i)];
        i = features[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
    }
    return i;
}

int DecisionTree::predict_token(const std::vector<float>& features) const {
    return nodes[static_cast<std::size_t>(route(features))].majority_token;
}

int make_token(bool correct, int label) { return label * 2 + (correct ? 0 : 1); }
bool token_correct(int token) { return token % 2 == 0; }
int token_label(int token) { return token / 2; }

DecisionTree learn_tree(const std::vector<std::vector<float>>& features,
                        const std::vector<int>& tokens, const TreeParams& params) {
    if (features.empty()) throw DataError("learn_tree: no rows");
    if (features.size() != tokens.size())
        throw DataError("learn_tree: feature/token count mismatch");
    if (params.min_leaf < 1 || params.max_depth < 0)
        throw ConfigError("learn_tree: min_leaf must be >= 1 and max_depth >= 0");
    const std::size_t width = features[0].size();
    for (const auto& f : features)
        if (f.size() != width) throw DataError("learn_tree: ragged feature rows");

    // Map arbitrary tokens to dense indices, sorted so histograms are stable.
    std::vector<int> dense_to_token(tokens);
    std::sort(dense_to_token.begin(), dense_to_token.end());
    dense_to_token.erase(std::unique(dense_to_token.begin(), dense_to_token.end()),
                         dense_to_token.end());
    std::vector<int> dense_tokens(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i)
        dense_tokens[i] = static_cast<int>(
            std::lower_bound(dense_to_token.begin(), dense_to_token.end(), tokens[i]) -
            dense_to_token.begin());

    TreeBuilder builder{features, dense_tokens, dense_to_token, params, {}};
    std::vector<std::size_t> all(features.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    builder.build(all, 0);
    return std::move(builder.tree);
}

std::vector<Pattern> extract_patterns(const DecisionTree& tree, int layer_id) {
    std::vector<Pattern> out;
    if (tree.nodes.empty()) return out;
    std::vector<Conjunct> path;

    // Preorder, left before right; recursion depth is bounded by tree depth.
    auto walk = [&](auto&& self, int node) -> void {
        const DecisionTree::Node& nd = tree.nodes[static_cast<std::size_t>(node)];
        if (nd.left < 0) {
            if (nd.pure) {
                Pattern p;
                p.layer_id = layer_id;
                p.kind = token_correct(nd.majority_token) ? PatternKind::correct
                                                          : PatternKind::mis;
                p.base_label = token_label(nd.majority_token);
                p.support = nd.count;
                p.conjuncts = path;
                out.push_back(std::move(p));
            }
            return;
        }
        path.push_back({nd.feature, CmpOp::less_equal, nd.threshold});
        self(self, nd.left);
        path.back() = {nd.feature, CmpOp::greater, nd.threshold};
        self(self, nd.right);
        path.pop_back();
    };
    walk(walk, 0);
    return out;
}

std::vector<ActivationRow> record_activations(const Model& m, const Dataset& ds, int threads) {
    validate_model(m);
    const int layer = flagged_dense_layer(m);
    std::vector<ActivationRow> rows(ds.samples.size());
    parallel_for(ds.samples.size(), threads, [&](std::size_t i) {
        const ImageSample& s = ds.samples[i];
        auto [logits, trace] = forward(m, s.pixels);
        ActivationRow row;
        row.id = s.id;
        row.neuron_values = trace.outputs[static_cast<std::size_t>(layer)].data;
        row.base_label = argmax_label(logits);
        row.correct = row.base_label == s.ideal_label;
        row.ideal_label = s.ideal_label;
        rows[i] = std::move(row);
    });
    return rows;
}

int infer_target_label(const std::vector<Pattern>& patterns) {
    const Pattern* best = nullptr;
    for (const Pattern& p : patterns) {
        if (p.kind != PatternKind::mis) continue;
        if (!best || p.support > best->support) best = &p;
    }
    if (!best)
        throw PipelineError("no mis-classification observed; the model may be clean");
    return best->base_label;
}

PatternSet select_P(const std::vector<Pattern>& patterns, int target) {
    PatternSet out;
    for (const Pattern& p : patterns)
        if (p.kind == PatternKind::mis && p.base_label == target) out.patterns.push_back(p);
    sort_by_support(out.patterns);
    return out;
}

MineResult mine_patterns(const Model& m, const Dataset& gen, const TreeParams& params,
                         int threads) {
    MineResult result;
    result.layer_id = flagged_dense_layer(m);
    result.rows = record_activations(m, gen, threads);
    if (result.rows.empty()) throw DataError("mine_patterns: empty dataset");

    std::vector<std::vector<float>> features;
    std::vector<int> tokens;
    features.reserve(result.rows.size());
    tokens.reserve(result.rows.size());
    for (const ActivationRow& r : result.rows) {
        features.push_back(r.neuron_values);
        tokens.push_back(make_token(r.correct, r.base_label));
    }
    result.tree = learn_tree(features, tokens, params);
    result.all_patterns = extract_patterns(result.tree, result.layer_id);
    return result;
}

PatternSet mine_correct_patterns(const Model& m, const Dataset& gen, const TreeParams& params,
                                 int threads) {
    const int layer = flagged_dense_layer(m);
    std::vector<ActivationRow> rows = record_activations(m, gen, threads);
    if (rows.empty()) throw DataError("mine_correct_patterns: empty dataset");

    std::vector<std::vector<float>> features;
    std::vector<int> tokens;
    features.reserve(rows.size());
    tokens.reserve(rows.size());
    for (ActivationRow& r : rows) {
        features.push_back(std::move(r.neuron_values));
        tokens.push_back(make_token(true, r.ideal_label));
    }
    DecisionTree tree = learn_tree(features, tokens, params);
    PatternSet out;
    out.patterns = extract_patterns(tree, layer);
    sort_by_support(out.patterns);
    return out;
}

std::string serialize_patterns(const PatternFile& pf) {
    ordered_json doc;
    doc["layer_id"] = pf.layer_id;
    doc["class_count"] = pf.class_count;
    doc["target_label"] = pf.target_label;
    if (pf.threshold_percent >= 0.0)
        doc["threshold_percent"] = pf.threshold_percent;
    else
        doc["threshold_percent"] = nullptr;
    doc["patterns"] = ordered_json::array();
    for (const Pattern& p : pf.patterns) {
        ordered_json jp;
        jp["kind"] = kind_str(p.kind);
        jp["label"] = p.base_label;
        jp["support"] = p.support;
        jp["conjuncts"] = ordered_json::array();
        for (const Conjunct& c : p.conjuncts)
            jp["conjuncts"].push_back(
                ordered_json::array({c.neuron, op_str(c.op), static_cast<double>(c.threshold)}));
        doc["patterns"].push_back(std::move(jp));
    }
    if (pf.imp_pixels.empty())
        doc["imp_pixels"] = nullptr;
    else
        doc["imp_pixels"] = pf.imp_pixels;
    doc["generator"] = pf.generator;
    return doc.dump(2) + "\n";
}

PatternFile deserialize_patterns(const std::string& text) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("pattern file is not valid JSON: ") + e.what());
    }
    try {
        PatternFile pf;
        pf.layer_id = doc.at("layer_id").get<int>();
        pf.class_count = doc.at("class_count").get<int>();
        pf.target_label = doc.at("target_label").get<int>();
        if (!doc.at("threshold_percent").is_null())
            pf.threshold_percent = doc.at("threshold_percent").get<double>();
        for (const auto& jp : doc.at("patterns")) {
            Pattern p;
            p.layer_id = pf.layer_id;
            p.kind = kind_from_str(jp.at("kind").get<std::string>());
            p.base_label = jp.at("label").get<int>();
            p.support = jp.at("support").get<int>();
            if (p.support < 1) throw FormatError("pattern support must be >= 1");
            for (const auto& jc : jp.at("conjuncts")) {
                Conjunct c;
                c.neuron = jc.at(0).get<int>();
                if (c.neuron < 0) throw FormatError("negative conjunct neuron index");
                c.op = op_from_str(jc.at(1).get<std::string>());
                c.threshold = static_cast<float>(jc.at(2).get<double>());
                p.conjuncts.push_back(c);
            }
            pf.patterns.push_back(std::move(p));
        }
        if (!doc.at("imp_pixels").is_null()) {
            pf.imp_pixels = doc.at("imp_pixels").get<std::vector<std::vector<int>>>();
            if (pf.imp_pixels.size() != pf.patterns.size())
                throw FormatError("imp_pixels count does not match pattern count");
        }
        if (doc.contains("generator") && doc.at("generator").is_string())
            pf.generator = doc.at("generator").get<std::string>();
        return pf;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed pattern file: ") + e.what());
    }
}

void save_patterns(const PatternFile& pf, const std::string& path) {
    atomic_write_file(path, serialize_patterns(pf));
}

PatternFile load_patterns(const std::string& path) {
    return deserialize_patterns(read_file(path));
}

}  // namespace pguard
