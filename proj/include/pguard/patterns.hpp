#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pguard/dataset.hpp"
#include "pguard/nn.hpp"

namespace pguard {

/// Neuron values at the flagged dense layer for one input, plus the renamed
/// label: an input classified to `base_label` is tagged correct when that
/// matches ideal_label and mis otherwise (the l_c / l_m renaming).
struct ActivationRow {
    int id = 0;
    std::vector<float> neuron_values;
    bool correct = false;
    int base_label = 0;  // the predicted label l in l_c / l_m
    int ideal_label = 0;
};

enum class PatternKind { correct, mis };
enum class CmpOp { greater, less_equal };

struct Conjunct {
    int neuron = 0;
    CmpOp op = CmpOp::less_equal;
    float threshold = 0.0f;
};

/// Conjunction of threshold constraints over one layer's neuron values. An
/// empty conjunct list matches everything.
struct Pattern {
    int layer_id = 0;
    PatternKind kind = PatternKind::correct;
    int base_label = 0;
    int support = 0;
    std::vector<Conjunct> conjuncts;
};

/// Patterns sorted by support descending; ties keep extraction order.
struct PatternSet {
    std::vector<Pattern> patterns;
};

bool matches(const Pattern& p, const std::vector<float>& activations);

struct TreeParams {
    int min_leaf = 1;
    int max_depth = 20;
};

/// Binary CART tree over activation rows; splits minimize Gini impurity,
/// candidate thresholds are midpoints between consecutive distinct sorted
/// values, left branch takes value <= threshold. Equal-quality splits
/// resolve to the lowest feature index, then the lowest threshold.
struct DecisionTree {
    struct Node {
        int feature = -1;
        float threshold = 0.0f;
        int left = -1;  // < 0 marks a leaf
        int right = -1;
        int majority_token = -1;
        int count = 0;
        bool pure = false;
    };
    std::vector<Node> nodes;  // nodes[0] is the root

    bool is_leaf(int i) const { return nodes[static_cast<std::size_t>(i)].left < 0; }
    int route(const std::vector<float>& features) const;
    int predict_token(const std::vector<float>& features) const;
};

// Renamed labels are encoded as integer tokens for the tree.
int make_token(bool correct, int label);
bool token_correct(int token);
int token_label(int token);

DecisionTree learn_tree(const std::vector<std::vector<float>>& features,
                        const std::vector<int>& tokens, const TreeParams& params);

/// One Pattern per pure leaf; conjuncts are the root-to-leaf decisions,
/// support is the leaf's training row count. Leaves are visited in
/// depth-first preorder, left before right.
std::vector<Pattern> extract_patterns(const DecisionTree& tree, int layer_id);

/// One row per sample: forward the model, record the flagged dense layer's
/// raw outputs, rename by correctness of the prediction.
std::vector<ActivationRow> record_activations(const Model& m, const Dataset& ds, int threads = 1);

/// Base label of the highest-support mis pattern; with a planted backdoor
/// this is the poison target.
int infer_target_label(const std::vector<Pattern>& patterns);

/// Mis patterns for the target label, sorted by support descending.
PatternSet select_P(const std::vector<Pattern>& patterns, int target);

struct MineResult {
    int layer_id = 0;
    std::vector<ActivationRow> rows;
    DecisionTree tree;
    std::vector<Pattern> all_patterns;
};

/// Records activations, learns one multi-class tree over the renamed
/// labels, and extracts every pure pattern.
MineResult mine_patterns(const Model& m, const Dataset& gen, const TreeParams& params,
                         int threads = 1);

/// Correct-label patterns for label guessing: every row is labeled with its
/// ideal label (poisoned rows keep their poisoned activations), so matching
/// a pattern predicts the ideal label directly.
PatternSet mine_correct_patterns(const Model& m, const Dataset& gen, const TreeParams& params,
                                 int threads = 1);

/// On-disk pattern document. threshold_percent < 0 and empty imp_pixels
/// mean the attribution stage has not annotated the file yet.
struct PatternFile {
    int layer_id = 0;
    int class_count = 0;
    int target_label = -1;
    double threshold_percent = -1.0;
    std::vector<Pattern> patterns;
    std::vector<std::vector<int>> imp_pixels;  // aligned 1:1 with patterns when present
    std::string generator;                     // free-form provenance, no timestamps
};

std::string serialize_patterns(const PatternFile& pf);
PatternFile deserialize_patterns(const std::string& text);
void save_patterns(const PatternFile& pf, const std::string& path);
PatternFile load_patterns(const std::string& path);

}  // namespace pguard
