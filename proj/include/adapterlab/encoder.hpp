#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "adapterlab/adapters.hpp"
#include "adapterlab/tape.hpp"

namespace adapterlab {

enum class Pooling { sum, mean };

// Special token ids live above the content range.
constexpr int kContentVocab = 64;
constexpr int kPadToken = 64;
constexpr int kIndicatorBase = 65;  // 65/66/67: blended-task skill indicators

struct EncoderConfig {
    size_t n_layers = 6;
    size_t d_model = 64;
    size_t n_heads = 4;
    size_t d_ffn = 128;
    size_t vocab_size = 72;  // 64 content tokens + 8 specials
    size_t max_len = 24;
    Pooling pooling = Pooling::sum;
    bool train_layer_norm = false;
    double init_std = 0.05;
    float ln_eps = 1e-5f;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) + " must be divisible by n_heads " + std::to_string(n_heads));
        if (n_layers == 0) throw ConfigError("encoder needs at least one layer");
        if (vocab_size <= static_cast<size_t>(kPadToken)) throw ConfigError("vocab too small for special tokens");
    }
};

// One adapter slot: empty (identity), a vanilla adapter, or a hierarchical one.
struct AdapterSlot {
    enum class Kind { empty, vanilla, hier };
    Kind kind = Kind::empty;
    VanillaAdapter vanilla;
    HierAdapter hier;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        if (kind == Kind::vanilla) vanilla.for_each_parameter(fn);
        if (kind == Kind::hier) hier.for_each_parameter(fn);
    }
    template <typename Fn>
    void for_each_sub_parameter(Fn&& fn) {
        if (kind == Kind::hier) {
            hier.ts_pre.for_each_parameter(fn);
            hier.ts_mid.for_each_parameter(fn);
        }
    }
};

// Post-norm block per Eq. 1, with an adapter slot after each sub-layer:
//   h <- LN(h + Ada(Attn(h))); h <- LN(h + Ada(FFN(h)))
struct TransformerBlock {
    Parameter Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    Parameter ln1_g, ln1_b;
    Parameter W1, b1, W2, b2;
    Parameter ln2_g, ln2_b;
    AdapterSlot slot_attn, slot_ffn;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(Wq); fn(bq); fn(Wk); fn(bk); fn(Wv); fn(bv); fn(Wo); fn(bo);
        fn(ln1_g); fn(ln1_b);
        fn(W1); fn(b1); fn(W2); fn(b2);
        fn(ln2_g); fn(ln2_b);
        slot_attn.for_each_parameter(fn);
        slot_ffn.for_each_parameter(fn);
    }
};

enum class TrainPolicy { all, none, adapters_only, head_only, adapters_and_heads, sub_adapters_only };

const char* train_policy_name(TrainPolicy p);

// Shared-tower bi-encoder: one stack applied to both the context and the
// candidate side, scored by dot product of pooled vectors. The optional head
// is the FE baseline's task-specific linear map on pooled outputs.
struct RetrievalModel {
    EncoderConfig cfg;
    AdapterConfig adapter_cfg;
    Parameter tok_emb, pos_emb;
    std::vector<TransformerBlock> blocks;
    bool has_head = false;
    Parameter head_W, head_b;

    template <typename Fn>
    void for_each_parameter(Fn&& fn) {
        fn(tok_emb);
        fn(pos_emb);
        for (auto& b : blocks) b.for_each_parameter(fn);
        if (has_head) {
            fn(head_W);
            fn(head_b);
        }
    }

    size_t total_param_count();
    size_t trainable_param_count();
    size_t adapter_insertion_count();  // filled slots
};

RetrievalModel init_model(const EncoderConfig& cfg, const AdapterConfig& adapter_cfg, uint64_t seed);

void attach_head(RetrievalModel& m, uint64_t seed);

// Fill both slots of each listed block with fresh (identity) vanilla adapters.
void attach_vanilla_adapters(RetrievalModel& m, const std::set<size_t>& block_ids, Rng& rng);

// Convert every filled vanilla slot into a hierarchical adapter whose base is
// the trained vanilla adapter and whose sub-adapters are fresh identities.
void promote_adapters_to_hier(RetrievalModel& m, const std::string& task_id, Rng& rng);

// Replace the adapter at each named sub-block position (2*block + 0 for the
// attention slot, +1 for the feed-forward slot) with the identity map.
void remove_adapter(RetrievalModel& m, const std::set<size_t>& positions);

void set_trainable(RetrievalModel& m, TrainPolicy policy);
void zero_grads(RetrievalModel& m);

// Forward of one block on the tape; nv = number of valid (non-pad) rows.
int block_forward(Tape& tape, const EncoderConfig& cfg, TransformerBlock& b, int h, int nv);

// Full encode on the tape: embeddings -> blocks -> pooled [1 x d_model]
// (-> head when use_head). Trailing pad tokens are masked out.
int encode(Tape& tape, RetrievalModel& m, const std::vector<int>& tokens, bool use_head = false);

// Convenience eval-path encode on a scratch tape.
Tensor encode_value(RetrievalModel& m, const std::vector<int>& tokens, bool use_head = false);

float score(RetrievalModel& m, const std::vector<int>& ctx, const std::vector<int>& cand);

}  // namespace adapterlab
