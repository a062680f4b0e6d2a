#pragma once

// Tiny decoder-only transformer trained from scratch: pre-norm blocks,
// learned positional embeddings, LoRA adapters on attention projections,
// PrefixLM/causal attention, AdamW with cosine schedule, hand-written
// backward pass, and a KV-cached inference session for the decoders.
//
// Weight matrices are stored [in x out] so the forward pass runs as
// row-axpy accumulation; each linear keeps a transposed shadow for the
// backward dX product. Shadows are refreshed after every parameter update.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cloze/common.hpp"
#include "cloze/views.hpp"

namespace cloze {

template <typename S>
struct MatT {
    int rows = 0, cols = 0;
    std::vector<S> a;

    void init(int r, int c) {
        rows = r;
        cols = c;
        a.assign(static_cast<size_t>(r) * static_cast<size_t>(c), S(0));
    }
    S* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const S* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
    S& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    S at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    void zero() { std::fill(a.begin(), a.end(), S(0)); }
};

template <typename S>
struct ParamT {
    std::string name;
    MatT<S> w;
    MatT<S> g;
    MatT<S> m, v;  // AdamW moments
    bool trainable = true;
    int train_row_begin = 0;  // rows below this stay frozen (reserved-embedding training)

    void init(const std::string& n, int rows, int cols) {
        name = n;
        w.init(rows, cols);
        g.init(rows, cols);
        m.init(rows, cols);
        v.init(rows, cols);
    }
    size_t count() const { return w.a.size(); }
};

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 128;
    int d_ff = 512;
    int max_seq = 512;
    int vocab_size = 0;
    bool lora_enabled = true;
    int lora_rank = 32;
    double lora_alpha = 32.0;
    std::vector<std::string> lora_targets = {"wq", "wv"};
    bool freeze_base = false;    // train only LoRA factors and reserved embedding rows
    int first_reserved_id = -1;  // start of the reserved embedding block, -1 if unknown
    double dropout = 0.0;
    uint64_t seed = 0;
};

void validate(const ModelConfig& cfg);
std::string config_hash(const ModelConfig& cfg);

struct TrainConfig {
    double lr_peak = 5e-5;
    std::string schedule = "cosine";
    int warmup_steps = 0;
    long long total_steps = 1;
    int batch_size = 4;
    double lambda_infill = 1.0;
    double grad_clip_norm = 1.0;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

// linear warmup to lr_peak, then cosine decay to zero at total_steps
double lr_at(long long step, const TrainConfig& cfg);

struct LossReport {
    double l_lm = 0.0;
    double l_infill = 0.0;
    double combined = 0.0;
    long long step = 0;
    double lr = 0.0;
    long long lm_tokens = 0;
    long long infill_tokens = 0;
    bool empty = false;  // no labeled positions in the batch
};

template <typename S>
struct LinearT {
    ParamT<S> w;   // [in x out]
    MatT<S> wt;    // transposed shadow
    bool lora = false;
    ParamT<S> la;  // [in x r]
    ParamT<S> lb;  // [r x out]
    MatT<S> lat, lbt;
    S lora_scale = S(0);
    int in = 0, out = 0, rank = 0;
};

template <typename S>
struct LayerNormT {
    ParamT<S> gain;
    ParamT<S> bias;
};

template <typename S>
struct BlockT {
    LayerNormT<S> ln1;
    LinearT<S> wq, wk, wv, wo;
    LayerNormT<S> ln2;
    LinearT<S> fc1, fc2;
};

// Activation tape recorded by a training forward pass.
template <typename S>
struct TapeT {
    int len = 0;
    int prefix_len = 0;
    std::vector<TokenId> ids;
    MatT<S> x0;
    struct Block {
        MatT<S> x_in;
        std::vector<S> mean1, rstd1;
        MatT<S> ln1_out;
        MatT<S> q, k, v;
        MatT<S> uq, uv, uk, uo;       // LoRA intermediates when adapted
        std::vector<MatT<S>> attw;    // per head, rows over allowed columns
        MatT<S> att_out;
        MatT<S> drop_att;             // dropout keep-scales, empty when disabled
        MatT<S> x_mid;
        std::vector<S> mean2, rstd2;
        MatT<S> ln2_out;
        MatT<S> h1;                   // pre-activation
        MatT<S> u1;
        MatT<S> drop_mlp;
    };
    std::vector<Block> blocks;
    MatT<S> x_final;  // input to the final layernorm
    std::vector<S> meanf, rstdf;
    MatT<S> lnf_out;
    MatT<S> logits;
};

template <typename S>
class ModelT {
public:
    explicit ModelT(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    // Full-sequence forward. prefix_len 0 means strictly causal; positions in
    // [0, prefix_len) attend bidirectionally within the prefix. Attention
    // weight on a disallowed pair is exactly zero. Pass a tape to enable
    // backward(); pass dropout_rng to sample dropout (training only).
    MatT<S> forward(const std::vector<TokenId>& ids, int prefix_len, TapeT<S>* tape = nullptr,
                    Rng* dropout_rng = nullptr) const;

    // Accumulates parameter gradients for dLoss/dLogits.
    void backward(const TapeT<S>& tape, const MatT<S>& dlogits);

    void zero_grads();
    void sync_shadows();
    size_t num_params() const;
    std::vector<ParamT<S>*> param_list();
    std::vector<const ParamT<S>*> param_list() const;

    ParamT<S>& tok_emb() { return tok_emb_; }

    // direct access for the inference session and checkpoint io
    const MatT<S>& tok_emb_w() const { return tok_emb_.w; }
    const MatT<S>& pos_emb_w() const { return pos_emb_.w; }
    const std::vector<BlockT<S>>& blocks() const { return blocks_; }
    const LayerNormT<S>& lnf() const { return lnf_; }
    const LinearT<S>& head() const { return head_; }

private:
    ModelConfig cfg_;
    int head_dim_ = 0;
    ParamT<S> tok_emb_;  // [V x d]
    ParamT<S> pos_emb_;  // [max_seq x d]
    std::vector<BlockT<S>> blocks_;
    LayerNormT<S> lnf_;
    LinearT<S> head_;  // [d x V]

    void init_params();
    void apply_freeze_flags();
};

using Model = ModelT<float>;

// Mean cross-entropy over labeled positions; labels[i] is scored against
// logits[i-1]. Returns 0 with the empty flag when nothing is labeled.
struct LossValue {
    double value = 0.0;
    long long labeled = 0;
    bool empty = true;
};
template <typename S>
LossValue loss_cross_entropy(const MatT<S>& logits, const std::vector<TokenId>& labels);

// One optimizer step over a batch of views. Loss = mean CE over lm/mft label
// positions + lambda * mean CE over infilling label positions; gradients are
// clipped to grad_clip_norm; AdamW update with lr_at(step). Deterministic
// given (model state, batch order, step). Throws NumericalError with
// diagnostics when the loss goes non-finite.
LossReport train_step(Model& model, const std::vector<const TrainingView*>& batch, const TrainConfig& tc,
                      long long step);

// Central finite differences vs. analytic gradients of the combined batch
// loss, in double precision, sampling at least min_samples parameters spread
// over every parameter family (restricted to trainable ones).
struct GradCheckReport {
    double max_rel_err = 0.0;
    int sampled = 0;
    std::map<std::string, double> per_family;
};
GradCheckReport grad_check(const ModelConfig& cfg, const std::vector<TrainingView>& batch,
                           double lambda_infill, double eps, int min_samples = 200,
                           uint64_t sample_seed = 0);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointExtra {
    TrainConfig train_config;
    long long step = 0;
    bool prefix_decode = false;  // prompt attends bidirectionally at inference
    std::string regime;
    std::vector<std::string> vocab_lines;
};

void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtra& extra);

struct LoadedCheckpoint {
    ModelConfig model_config;
    CheckpointExtra extra;
    Model model;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Refuses (DataError) when the stored config hash differs from the model's.
void load_checkpoint_into(Model& model, const std::string& path, CheckpointExtra* extra = nullptr);

// ---------------------------------------------------------------------------
// KV-cached incremental inference
// ---------------------------------------------------------------------------

class InferenceSession {
public:
    // capacity = maximum total sequence length (prompt + generated)
    InferenceSession(const Model& model, int capacity);

    // Runs the prompt in one pass (prefix_len positions attend
    // bidirectionally) and returns the logits of the last position.
    std::vector<float> prefill(const std::vector<TokenId>& ids, int prefix_len);

    // Appends one token and returns the logits at its position.
    std::vector<float> step(TokenId token);

    int length() const { return len_; }
    int capacity() const { return capacity_; }

private:
    const Model* model_;
    int capacity_ = 0;
    int len_ = 0;
    std::vector<MatT<float>> kcache_, vcache_;  // per layer [capacity x d]

    std::vector<float> forward_one(TokenId token, int pos, int attend_up_to);
};

}  // namespace cloze
