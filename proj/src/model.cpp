#include "cloze/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <type_traits>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cloze {

using nlohmann::json;

namespace {
constexpr double kLnEps = 1e-5;
}

// ---------------------------------------------------------------------------
// config plumbing
// ---------------------------------------------------------------------------

void validate(const ModelConfig& cfg) {
    if (cfg.n_layers < 1) throw DataError("model config: n_layers must be >= 1");
    if (cfg.n_heads < 1) throw DataError("model config: n_heads must be >= 1");
    if (cfg.d_model < 1 || cfg.d_model % cfg.n_heads != 0) {
        throw DataError("model config: d_model must be positive and divisible by n_heads");
    }
    if (cfg.d_ff < 1) throw DataError("model config: d_ff must be >= 1");
    if (cfg.max_seq < 2) throw DataError("model config: max_seq must be >= 2");
    if (cfg.vocab_size < 2) throw DataError("model config: vocab_size must be >= 2");
    if (cfg.lora_enabled && cfg.lora_rank < 1) {
        throw DataError("model config: lora_rank must be >= 1 when adapters are enabled");
    }
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw DataError("model config: dropout must be in [0,1)");
    for (const auto& t : cfg.lora_targets) {
        if (t != "wq" && t != "wk" && t != "wv" && t != "wo") {
            throw DataError("model config: unknown lora target '" + t + "'");
        }
    }
    if (cfg.freeze_base && !cfg.lora_enabled) {
        throw DataError("model config: freeze_base requires lora_enabled");
    }
}

void validate(const TrainConfig& cfg) {
    if (cfg.total_steps < 1) throw DataError("train config: total_steps must be >= 1");
    if (cfg.lr_peak <= 0.0) throw DataError("train config: lr_peak must be > 0");
    if (cfg.batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (cfg.warmup_steps < 0 || cfg.warmup_steps > cfg.total_steps) {
        throw DataError("train config: warmup_steps must be in [0, total_steps]");
    }
    if (cfg.schedule != "cosine" && cfg.schedule != "constant") {
        throw DataError("train config: schedule must be cosine or constant");
    }
    if (cfg.grad_clip_norm < 0.0) throw DataError("train config: grad_clip_norm must be >= 0");
    if (cfg.lambda_infill < 0.0) throw DataError("train config: lambda_infill must be >= 0");
}

static json model_config_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},
                {"n_heads", c.n_heads},
                {"d_model", c.d_model},
                {"d_ff", c.d_ff},
                {"max_seq", c.max_seq},
                {"vocab_size", c.vocab_size},
                {"lora_enabled", c.lora_enabled},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"lora_targets", c.lora_targets},
                {"freeze_base", c.freeze_base},
                {"first_reserved_id", c.first_reserved_id},
                {"dropout", c.dropout},
                {"seed", c.seed}};
}

static ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.lora_enabled = j.at("lora_enabled").get<bool>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.lora_targets = j.at("lora_targets").get<std::vector<std::string>>();
    c.freeze_base = j.at("freeze_base").get<bool>();
    c.first_reserved_id = j.at("first_reserved_id").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

static json train_config_json(const TrainConfig& c) {
    return json{{"lr_peak", c.lr_peak},
                {"schedule", c.schedule},
                {"warmup_steps", c.warmup_steps},
                {"total_steps", c.total_steps},
                {"batch_size", c.batch_size},
                {"lambda_infill", c.lambda_infill},
                {"grad_clip_norm", c.grad_clip_norm},
                {"weight_decay", c.weight_decay},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"seed", c.seed}};
}

static TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.lr_peak = j.at("lr_peak").get<double>();
    c.schedule = j.at("schedule").get<std::string>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.total_steps = j.at("total_steps").get<long long>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lambda_infill = j.at("lambda_infill").get<double>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

std::string config_hash(const ModelConfig& cfg) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(model_config_json(cfg).dump())));
    return buf;
}

double lr_at(long long step, const TrainConfig& cfg) {
    if (cfg.schedule == "constant") return cfg.lr_peak;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double denom = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    if (denom <= 0) return cfg.lr_peak;
    double progress = static_cast<double>(step - cfg.warmup_steps) / denom;
    progress = std::min(1.0, std::max(0.0, progress));
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

namespace {

template <typename S>
void transpose_into(const MatT<S>& src, MatT<S>& dst) {
    if (dst.rows != src.cols || dst.cols != src.rows) dst.init(src.cols, src.rows);
    for (int r = 0; r < src.rows; ++r) {
        const S* s = src.row(r);
        for (int c = 0; c < src.cols; ++c) dst.at(c, r) = s[c];
    }
}

template <typename S>
void lin_init(LinearT<S>& lin, const std::string& name, int in, int out, Rng& rng, double std_dev,
              bool lora, int rank, double alpha) {
    lin.in = in;
    lin.out = out;
    lin.w.init(name, in, out);
    for (auto& x : lin.w.w.a) x = static_cast<S>(rng.normal() * std_dev);
    lin.lora = lora;
    if (lora) {
        lin.rank = rank;
        lin.lora_scale = static_cast<S>(alpha / rank);
        lin.la.init(name + ".lora_a", in, rank);
        for (auto& x : lin.la.w.a) x = static_cast<S>(rng.normal() * std_dev);
        lin.lb.init(name + ".lora_b", rank, out);  // zero: adapters start as identity-delta
    }
}

template <typename S>
void lin_sync(LinearT<S>& lin) {
    transpose_into(lin.w.w, lin.wt);
    if (lin.lora) {
        transpose_into(lin.la.w, lin.lat);
        transpose_into(lin.lb.w, lin.lbt);
    }
}

// y[t,:] = x[t,:] . W (+ lora); u_store receives x.A when adapted
template <typename S>
void lin_forward(const LinearT<S>& lin, const MatT<S>& x, MatT<S>& y,
                 std::type_identity_t<MatT<S>>* u_store) {
    const int T = x.rows;
    y.init(T, lin.out);
    for (int t = 0; t < T; ++t) {
        const S* xr = x.row(t);
        S* yr = y.row(t);
        for (int k = 0; k < lin.in; ++k) {
            const S xv = xr[k];
            if (xv == S(0)) continue;
            const S* wr = lin.w.w.row(k);
            for (int o = 0; o < lin.out; ++o) yr[o] += xv * wr[o];
        }
    }
    if (lin.lora) {
        MatT<S>& u = *u_store;
        u.init(T, lin.rank);
        for (int t = 0; t < T; ++t) {
            const S* xr = x.row(t);
            S* ur = u.row(t);
            for (int k = 0; k < lin.in; ++k) {
                const S xv = xr[k];
                if (xv == S(0)) continue;
                const S* ar = lin.la.w.row(k);
                for (int r = 0; r < lin.rank; ++r) ur[r] += xv * ar[r];
            }
        }
        for (int t = 0; t < T; ++t) {
            const S* ur = u.row(t);
            S* yr = y.row(t);
            for (int r = 0; r < lin.rank; ++r) {
                const S uv = lin.lora_scale * ur[r];
                if (uv == S(0)) continue;
                const S* br = lin.lb.w.row(r);
                for (int o = 0; o < lin.out; ++o) yr[o] += uv * br[o];
            }
        }
    }
}

// single-row variant for incremental inference
template <typename S>
void lin_forward_row(const LinearT<S>& lin, const S* x, S* y) {
    for (int o = 0; o < lin.out; ++o) y[o] = S(0);
    for (int k = 0; k < lin.in; ++k) {
        const S xv = x[k];
        if (xv == S(0)) continue;
        const S* wr = lin.w.w.row(k);
        for (int o = 0; o < lin.out; ++o) y[o] += xv * wr[o];
    }
    if (lin.lora) {
        std::vector<S> u(static_cast<size_t>(lin.rank), S(0));
        for (int k = 0; k < lin.in; ++k) {
            const S xv = x[k];
            if (xv == S(0)) continue;
            const S* ar = lin.la.w.row(k);
            for (int r = 0; r < lin.rank; ++r) u[static_cast<size_t>(r)] += xv * ar[r];
        }
        for (int r = 0; r < lin.rank; ++r) {
            const S uv = lin.lora_scale * u[static_cast<size_t>(r)];
            if (uv == S(0)) continue;
            const S* br = lin.lb.w.row(r);
            for (int o = 0; o < lin.out; ++o) y[o] += uv * br[o];
        }
    }
}

// accumulates dW (+lora grads) and dX for dY
template <typename S>
void lin_backward(LinearT<S>& lin, const MatT<S>& x, const std::type_identity_t<MatT<S>>* u,
                  const MatT<S>& dy, MatT<S>& dx) {
    const int T = x.rows;
    for (int t = 0; t < T; ++t) {
        const S* xr = x.row(t);
        const S* dyr = dy.row(t);
        for (int k = 0; k < lin.in; ++k) {
            const S xv = xr[k];
            if (xv == S(0)) continue;
            S* gr = lin.w.g.row(k);
            for (int o = 0; o < lin.out; ++o) gr[o] += xv * dyr[o];
        }
    }
    for (int t = 0; t < T; ++t) {
        const S* dyr = dy.row(t);
        S* dxr = dx.row(t);
        for (int o = 0; o < lin.out; ++o) {
            const S dv = dyr[o];
            if (dv == S(0)) continue;
            const S* wtr = lin.wt.row(o);
            for (int k = 0; k < lin.in; ++k) dxr[k] += dv * wtr[k];
        }
    }
    if (lin.lora) {
        MatT<S> du;
        du.init(T, lin.rank);
        for (int t = 0; t < T; ++t) {
            const S* ur = u->row(t);
            const S* dyr = dy.row(t);
            S* dur = du.row(t);
            // dB += scale * u^T dy ; du = scale * dy B^T
            for (int r = 0; r < lin.rank; ++r) {
                const S uv = lin.lora_scale * ur[r];
                if (uv != S(0)) {
                    S* gbr = lin.lb.g.row(r);
                    for (int o = 0; o < lin.out; ++o) gbr[o] += uv * dyr[o];
                }
            }
            for (int o = 0; o < lin.out; ++o) {
                const S dv = lin.lora_scale * dyr[o];
                if (dv == S(0)) continue;
                const S* btr = lin.lbt.row(o);
                for (int r = 0; r < lin.rank; ++r) dur[r] += dv * btr[r];
            }
        }
        for (int t = 0; t < T; ++t) {
            const S* xr = x.row(t);
            const S* dur = du.row(t);
            S* dxr = dx.row(t);
            for (int k = 0; k < lin.in; ++k) {
                const S xv = xr[k];
                if (xv != S(0)) {
                    S* gar = lin.la.g.row(k);
                    for (int r = 0; r < lin.rank; ++r) gar[r] += xv * dur[r];
                }
            }
            for (int r = 0; r < lin.rank; ++r) {
                const S dv = dur[r];
                if (dv == S(0)) continue;
                const S* atr = lin.lat.row(r);
                for (int k = 0; k < lin.in; ++k) dxr[k] += dv * atr[k];
            }
        }
    }
}

template <typename S>
void ln_init(LayerNormT<S>& ln, const std::string& name, int d) {
    ln.gain.init(name + ".gain", 1, d);
    ln.bias.init(name + ".bias", 1, d);
    std::fill(ln.gain.w.a.begin(), ln.gain.w.a.end(), S(1));
}

template <typename S>
void ln_forward(const LayerNormT<S>& ln, const MatT<S>& x, MatT<S>& y, std::vector<S>& mean,
                std::vector<S>& rstd) {
    const int T = x.rows, d = x.cols;
    y.init(T, d);
    mean.assign(static_cast<size_t>(T), S(0));
    rstd.assign(static_cast<size_t>(T), S(0));
    const S* g = ln.gain.w.row(0);
    const S* b = ln.bias.w.row(0);
    for (int t = 0; t < T; ++t) {
        const S* xr = x.row(t);
        S mu = S(0);
        for (int c = 0; c < d; ++c) mu += xr[c];
        mu /= static_cast<S>(d);
        S var = S(0);
        for (int c = 0; c < d; ++c) {
            const S dvn = xr[c] - mu;
            var += dvn * dvn;
        }
        var /= static_cast<S>(d);
        const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        mean[static_cast<size_t>(t)] = mu;
        rstd[static_cast<size_t>(t)] = rs;
        S* yr = y.row(t);
        for (int c = 0; c < d; ++c) yr[c] = (xr[c] - mu) * rs * g[c] + b[c];
    }
}

template <typename S>
void ln_forward_row(const LayerNormT<S>& ln, const S* x, S* y, int d) {
    S mu = S(0);
    for (int c = 0; c < d; ++c) mu += x[c];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int c = 0; c < d; ++c) {
        const S dvn = x[c] - mu;
        var += dvn * dvn;
    }
    var /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    const S* g = ln.gain.w.row(0);
    const S* b = ln.bias.w.row(0);
    for (int c = 0; c < d; ++c) y[c] = (x[c] - mu) * rs * g[c] + b[c];
}

template <typename S>
void ln_backward(LayerNormT<S>& ln, const MatT<S>& x, const std::vector<S>& mean, const std::vector<S>& rstd,
                 const MatT<S>& dy, MatT<S>& dx) {
    const int T = x.rows, d = x.cols;
    const S* g = ln.gain.w.row(0);
    S* dg = ln.gain.g.row(0);
    S* db = ln.bias.g.row(0);
    for (int t = 0; t < T; ++t) {
        const S* xr = x.row(t);
        const S* dyr = dy.row(t);
        S* dxr = dx.row(t);
        const S mu = mean[static_cast<size_t>(t)];
        const S rs = rstd[static_cast<size_t>(t)];
        S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
        for (int c = 0; c < d; ++c) {
            const S xhat = (xr[c] - mu) * rs;
            const S dxhat = dyr[c] * g[c];
            dg[c] += dyr[c] * xhat;
            db[c] += dyr[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        const S inv_d = S(1) / static_cast<S>(d);
        for (int c = 0; c < d; ++c) {
            const S xhat = (xr[c] - mu) * rs;
            const S dxhat = dyr[c] * g[c];
            dxr[c] += rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename S>
ModelT<S>::ModelT(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    head_dim_ = cfg_.d_model / cfg_.n_heads;
    init_params();
    apply_freeze_flags();
    sync_shadows();
}

template <typename S>
void ModelT<S>::init_params() {
    Rng rng(mix64(cfg_.seed ^ 0x6d6f64656cull));
    const double std_dev = 0.02;
    auto has_lora = [this](const char* t) {
        return cfg_.lora_enabled && std::find(cfg_.lora_targets.begin(), cfg_.lora_targets.end(), t) !=
                                        cfg_.lora_targets.end();
    };

    tok_emb_.init("tok_emb", cfg_.vocab_size, cfg_.d_model);
    for (auto& x : tok_emb_.w.a) x = static_cast<S>(rng.normal() * std_dev);
    pos_emb_.init("pos_emb", cfg_.max_seq, cfg_.d_model);
    for (auto& x : pos_emb_.w.a) x = static_cast<S>(rng.normal() * std_dev);

    blocks_.resize(static_cast<size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        BlockT<S>& b = blocks_[static_cast<size_t>(l)];
        const std::string p = "layer" + std::to_string(l) + ".";
        ln_init(b.ln1, p + "ln1", cfg_.d_model);
        lin_init(b.wq, p + "wq", cfg_.d_model, cfg_.d_model, rng, std_dev, has_lora("wq"), cfg_.lora_rank,
                 cfg_.lora_alpha);
        lin_init(b.wk, p + "wk", cfg_.d_model, cfg_.d_model, rng, std_dev, has_lora("wk"), cfg_.lora_rank,
                 cfg_.lora_alpha);
        lin_init(b.wv, p + "wv", cfg_.d_model, cfg_.d_model, rng, std_dev, has_lora("wv"), cfg_.lora_rank,
                 cfg_.lora_alpha);
        lin_init(b.wo, p + "wo", cfg_.d_model, cfg_.d_model, rng, std_dev, has_lora("wo"), cfg_.lora_rank,
                 cfg_.lora_alpha);
        ln_init(b.ln2, p + "ln2", cfg_.d_model);
        lin_init(b.fc1, p + "fc1", cfg_.d_model, cfg_.d_ff, rng, std_dev, false, 0, 0);
        lin_init(b.fc2, p + "fc2", cfg_.d_ff, cfg_.d_model, rng, std_dev, false, 0, 0);
    }
    ln_init(lnf_, "lnf", cfg_.d_model);
    lin_init(head_, "head", cfg_.d_model, cfg_.vocab_size, rng, std_dev, false, 0, 0);
}

template <typename S>
void ModelT<S>::apply_freeze_flags() {
    if (!cfg_.freeze_base) return;
    for (ParamT<S>* p : param_list()) {
        const bool is_lora = p->name.find(".lora_") != std::string::npos;
        p->trainable = is_lora;
    }
    // reserved-token embedding rows stay trainable
    if (cfg_.first_reserved_id >= 0 && cfg_.first_reserved_id < cfg_.vocab_size) {
        tok_emb_.trainable = true;
        tok_emb_.train_row_begin = cfg_.first_reserved_id;
    }
}

template <typename S>
std::vector<ParamT<S>*> ModelT<S>::param_list() {
    std::vector<ParamT<S>*> out;
    out.push_back(&tok_emb_);
    out.push_back(&pos_emb_);
    for (auto& b : blocks_) {
        for (auto* ln : {&b.ln1, &b.ln2}) {
            out.push_back(&ln->gain);
            out.push_back(&ln->bias);
        }
        for (auto* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2}) {
            out.push_back(&lin->w);
            if (lin->lora) {
                out.push_back(&lin->la);
                out.push_back(&lin->lb);
            }
        }
    }
    out.push_back(&lnf_.gain);
    out.push_back(&lnf_.bias);
    out.push_back(&head_.w);
    return out;
}

template <typename S>
std::vector<const ParamT<S>*> ModelT<S>::param_list() const {
    auto list = const_cast<ModelT<S>*>(this)->param_list();
    return {list.begin(), list.end()};
}

template <typename S>
size_t ModelT<S>::num_params() const {
    size_t n = 0;
    for (const ParamT<S>* p : param_list()) n += p->count();
    return n;
}

template <typename S>
void ModelT<S>::zero_grads() {
    for (ParamT<S>* p : param_list()) p->g.zero();
}

template <typename S>
void ModelT<S>::sync_shadows() {
    for (auto& b : blocks_) {
        for (auto* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2}) lin_sync(*lin);
    }
    lin_sync(head_);
}

namespace {

template <typename S>
void apply_dropout(MatT<S>& x, MatT<S>& keep, double p, Rng* rng) {
    if (!rng || p <= 0.0) return;
    keep.init(x.rows, x.cols);
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    for (size_t i = 0; i < x.a.size(); ++i) {
        keep.a[i] = rng->bernoulli(p) ? S(0) : scale;
        x.a[i] *= keep.a[i];
    }
}

}  // namespace

template <typename S>
MatT<S> ModelT<S>::forward(const std::vector<TokenId>& ids, int prefix_len, TapeT<S>* tape,
                           Rng* dropout_rng) const {
    const int T = static_cast<int>(ids.size());
    if (T < 1) throw DataError("forward: empty input");
    if (T > cfg_.max_seq) {
        throw DataError("forward: input length " + std::to_string(T) + " exceeds max_seq " +
                        std::to_string(cfg_.max_seq));
    }
    if (prefix_len < 0 || prefix_len > T) throw DataError("forward: prefix_len out of range");
    for (TokenId id : ids) {
        if (id < 0 || id >= cfg_.vocab_size) throw DataError("forward: token id out of range");
    }
    const int d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int hd = head_dim_;
    const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    TapeT<S> local;
    TapeT<S>& tp = tape ? *tape : local;
    tp.len = T;
    tp.prefix_len = prefix_len;
    tp.ids = ids;
    tp.blocks.assign(static_cast<size_t>(cfg_.n_layers), {});

    MatT<S> x;
    x.init(T, d);
    for (int t = 0; t < T; ++t) {
        const S* te = tok_emb_.w.row(ids[static_cast<size_t>(t)]);
        const S* pe = pos_emb_.w.row(t);
        S* xr = x.row(t);
        for (int c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }
    tp.x0 = x;

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const BlockT<S>& b = blocks_[static_cast<size_t>(l)];
        auto& tb = tp.blocks[static_cast<size_t>(l)];
        tb.x_in = x;

        ln_forward(b.ln1, x, tb.ln1_out, tb.mean1, tb.rstd1);
        lin_forward(b.wq, tb.ln1_out, tb.q, &tb.uq);
        lin_forward(b.wk, tb.ln1_out, tb.k, &tb.uk);
        lin_forward(b.wv, tb.ln1_out, tb.v, &tb.uv);

        tb.att_out.init(T, d);
        tb.attw.assign(static_cast<size_t>(H), {});
        for (int h = 0; h < H; ++h) {
            MatT<S>& w = tb.attw[static_cast<size_t>(h)];
            w.init(T, T);
            const int off = h * hd;
            for (int i = 0; i < T; ++i) {
                const int ai = std::max(i, prefix_len - 1);  // allowed columns [0, ai]
                const S* qi = tb.q.row(i) + off;
                S* wrow = w.row(i);
                S maxv = std::numeric_limits<S>::lowest();
                for (int j = 0; j <= ai; ++j) {
                    const S* kj = tb.k.row(j) + off;
                    S s = S(0);
                    for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_hd;
                    wrow[j] = s;
                    if (s > maxv) maxv = s;
                }
                S denom = S(0);
                for (int j = 0; j <= ai; ++j) {
                    wrow[j] = std::exp(wrow[j] - maxv);
                    denom += wrow[j];
                }
                const S inv = S(1) / denom;
                S* out = tb.att_out.row(i) + off;
                for (int j = 0; j <= ai; ++j) {
                    wrow[j] *= inv;
                    const S wij = wrow[j];
                    const S* vj = tb.v.row(j) + off;
                    for (int c = 0; c < hd; ++c) out[c] += wij * vj[c];
                }
            }
        }

        MatT<S> proj;
        lin_forward(b.wo, tb.att_out, proj, &tb.uo);
        if (dropout_rng && cfg_.dropout > 0.0) apply_dropout(proj, tb.drop_att, cfg_.dropout, dropout_rng);
        for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += proj.a[i];
        tb.x_mid = x;

        ln_forward(b.ln2, x, tb.ln2_out, tb.mean2, tb.rstd2);
        lin_forward(b.fc1, tb.ln2_out, tb.h1, &tb.u1);
        MatT<S> act = tb.h1;
        for (auto& vi : act.a) vi = vi > S(0) ? vi : S(0);
        MatT<S> h2;
        lin_forward(b.fc2, act, h2, nullptr);
        if (dropout_rng && cfg_.dropout > 0.0) apply_dropout(h2, tb.drop_mlp, cfg_.dropout, dropout_rng);
        for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += h2.a[i];
    }

    tp.x_final = x;
    ln_forward(lnf_, x, tp.lnf_out, tp.meanf, tp.rstdf);
    MatT<S> logits;
    lin_forward(head_, tp.lnf_out, logits, nullptr);
    if (tape) tape->logits = logits;
    return logits;
}

template <typename S>
void ModelT<S>::backward(const TapeT<S>& tp, const MatT<S>& dlogits) {
    const int T = tp.len;
    const int d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const int hd = head_dim_;
    const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    const int prefix_len = tp.prefix_len;

    MatT<S> dx;
    dx.init(T, d);
    {
        MatT<S> d_lnf;
        d_lnf.init(T, d);
        lin_backward(head_, tp.lnf_out, nullptr, dlogits, d_lnf);
        ln_backward(lnf_, tp.x_final, tp.meanf, tp.rstdf, d_lnf, dx);
    }

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        BlockT<S>& b = blocks_[static_cast<size_t>(l)];
        const auto& tb = tp.blocks[static_cast<size_t>(l)];

        // mlp branch
        MatT<S> dh2 = dx;  // residual passthrough: dx continues to x_mid
        if (tb.drop_mlp.rows > 0) {
            for (size_t i = 0; i < dh2.a.size(); ++i) dh2.a[i] *= tb.drop_mlp.a[i];
        }
        MatT<S> act = tb.h1;
        for (auto& vi : act.a) vi = vi > S(0) ? vi : S(0);
        MatT<S> dact;
        dact.init(T, cfg_.d_ff);
        lin_backward(b.fc2, act, nullptr, dh2, dact);
        for (size_t i = 0; i < dact.a.size(); ++i) {
            if (tb.h1.a[i] <= S(0)) dact.a[i] = S(0);
        }
        MatT<S> d_ln2;
        d_ln2.init(T, d);
        lin_backward(b.fc1, tp.blocks[static_cast<size_t>(l)].ln2_out, tb.u1.rows ? &tb.u1 : nullptr, dact,
                     d_ln2);
        ln_backward(b.ln2, tb.x_mid, tb.mean2, tb.rstd2, d_ln2, dx);

        // attention branch
        MatT<S> dproj = dx;
        if (tb.drop_att.rows > 0) {
            for (size_t i = 0; i < dproj.a.size(); ++i) dproj.a[i] *= tb.drop_att.a[i];
        }
        MatT<S> d_attout;
        d_attout.init(T, d);
        lin_backward(b.wo, tb.att_out, tb.uo.rows ? &tb.uo : nullptr, dproj, d_attout);

        MatT<S> dq, dk, dv;
        dq.init(T, d);
        dk.init(T, d);
        dv.init(T, d);
        std::vector<S> dwrow(static_cast<size_t>(T));
        for (int h = 0; h < H; ++h) {
            const MatT<S>& w = tb.attw[static_cast<size_t>(h)];
            const int off = h * hd;
            for (int i = 0; i < T; ++i) {
                const int ai = std::max(i, prefix_len - 1);
                const S* doi = d_attout.row(i) + off;
                const S* wrow = w.row(i);
                S dot_sum = S(0);
                for (int j = 0; j <= ai; ++j) {
                    const S* vj = tb.v.row(j) + off;
                    S dw = S(0);
                    for (int c = 0; c < hd; ++c) dw += doi[c] * vj[c];
                    dwrow[static_cast<size_t>(j)] = dw;
                    dot_sum += wrow[j] * dw;
                    S* dvj = dv.row(j) + off;
                    const S wij = wrow[j];
                    for (int c = 0; c < hd; ++c) dvj[c] += wij * doi[c];
                }
                const S* qi = tb.q.row(i) + off;
                S* dqi = dq.row(i) + off;
                for (int j = 0; j <= ai; ++j) {
                    const S ds = wrow[j] * (dwrow[static_cast<size_t>(j)] - dot_sum) * inv_sqrt_hd;
                    if (ds == S(0)) continue;
                    const S* kj = tb.k.row(j) + off;
                    S* dkj = dk.row(j) + off;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        MatT<S> d_ln1;
        d_ln1.init(T, d);
        lin_backward(b.wq, tb.ln1_out, tb.uq.rows ? &tb.uq : nullptr, dq, d_ln1);
        lin_backward(b.wk, tb.ln1_out, tb.uk.rows ? &tb.uk : nullptr, dk, d_ln1);
        lin_backward(b.wv, tb.ln1_out, tb.uv.rows ? &tb.uv : nullptr, dv, d_ln1);
        ln_backward(b.ln1, tb.x_in, tb.mean1, tb.rstd1, d_ln1, dx);
    }

    for (int t = 0; t < T; ++t) {
        const S* dxr = dx.row(t);
        S* gt = tok_emb_.g.row(tp.ids[static_cast<size_t>(t)]);
        S* gp = pos_emb_.g.row(t);
        for (int c = 0; c < d; ++c) {
            gt[c] += dxr[c];
            gp[c] += dxr[c];
        }
    }
}

template class ModelT<float>;
template class ModelT<double>;

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

template <typename S>
LossValue loss_cross_entropy(const MatT<S>& logits, const std::vector<TokenId>& labels) {
    if (static_cast<size_t>(logits.rows) != labels.size()) {
        throw DataError("loss: logits/labels length mismatch");
    }
    LossValue lv;
    double sum = 0.0;
    for (size_t i = 1; i < labels.size(); ++i) {
        const TokenId target = labels[i];
        if (target == kIgnoreLabel) continue;
        if (target < 0 || target >= logits.cols) throw DataError("loss: label id out of range");
        const S* row = logits.row(static_cast<int>(i) - 1);
        S maxv = row[0];
        for (int c = 1; c < logits.cols; ++c) maxv = std::max(maxv, row[c]);
        double lse = 0.0;
        for (int c = 0; c < logits.cols; ++c) lse += std::exp(static_cast<double>(row[c] - maxv));
        lse = std::log(lse) + static_cast<double>(maxv);
        sum += lse - static_cast<double>(row[target]);
        ++lv.labeled;
    }
    if (labels.size() > 0 && labels[0] != kIgnoreLabel) throw DataError("loss: label at position 0");
    lv.empty = (lv.labeled == 0);
    lv.value = lv.empty ? 0.0 : sum / static_cast<double>(lv.labeled);
    return lv;
}

template LossValue loss_cross_entropy<float>(const MatT<float>&, const std::vector<TokenId>&);
template LossValue loss_cross_entropy<double>(const MatT<double>&, const std::vector<TokenId>&);

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

namespace {

// CE sum over labeled positions and the scaled dLoss/dLogits.
template <typename S>
double ce_and_dlogits(const MatT<S>& logits, const std::vector<TokenId>& labels, double scale,
                      MatT<S>& dlogits) {
    dlogits.init(logits.rows, logits.cols);
    double sum = 0.0;
    std::vector<double> probs(static_cast<size_t>(logits.cols));
    for (size_t i = 1; i < labels.size(); ++i) {
        const TokenId target = labels[i];
        if (target == kIgnoreLabel) continue;
        const S* row = logits.row(static_cast<int>(i) - 1);
        S maxv = row[0];
        for (int c = 1; c < logits.cols; ++c) maxv = std::max(maxv, row[c]);
        double denom = 0.0;
        for (int c = 0; c < logits.cols; ++c) {
            probs[static_cast<size_t>(c)] = std::exp(static_cast<double>(row[c] - maxv));
            denom += probs[static_cast<size_t>(c)];
        }
        sum += std::log(denom) + static_cast<double>(maxv) - static_cast<double>(row[target]);
        S* drow = dlogits.row(static_cast<int>(i) - 1);
        const double inv = 1.0 / denom;
        for (int c = 0; c < logits.cols; ++c) {
            drow[c] += static_cast<S>(scale * (probs[static_cast<size_t>(c)] * inv - (c == target ? 1.0 : 0.0)));
        }
    }
    return sum;
}

template <typename S>
struct BatchLoss {
    double l_lm = 0.0;
    double l_infill = 0.0;
    long long lm_tokens = 0;
    long long infill_tokens = 0;
};

// Shared by train_step and grad_check: accumulates gradients of
// l_lm + lambda * l_infill over the batch into the model.
template <typename S>
BatchLoss<S> batch_loss_and_grads(ModelT<S>& model, const std::vector<const TrainingView*>& batch,
                                  double lambda_infill, Rng* dropout_rng) {
    BatchLoss<S> bl;
    for (const TrainingView* v : batch) {
        for (size_t i = 1; i < v->labels.size(); ++i) {
            if (v->labels[i] == kIgnoreLabel) continue;
            if (is_infill_kind(v->kind)) {
                ++bl.infill_tokens;
            } else {
                ++bl.lm_tokens;
            }
        }
    }
    double sum_lm = 0.0, sum_infill = 0.0;
    for (const TrainingView* v : batch) {
        const bool infill = is_infill_kind(v->kind);
        const long long denom = infill ? bl.infill_tokens : bl.lm_tokens;
        if (denom == 0) continue;
        const double scale = (infill ? lambda_infill : 1.0) / static_cast<double>(denom);
        TapeT<S> tape;
        MatT<S> logits = model.forward(v->input_ids, v->prefix_len, &tape, dropout_rng);
        MatT<S> dlogits;
        const double ce = ce_and_dlogits(logits, v->labels, scale, dlogits);
        (infill ? sum_infill : sum_lm) += ce;
        model.backward(tape, dlogits);
    }
    bl.l_lm = bl.lm_tokens ? sum_lm / static_cast<double>(bl.lm_tokens) : 0.0;
    bl.l_infill = bl.infill_tokens ? sum_infill / static_cast<double>(bl.infill_tokens) : 0.0;
    return bl;
}

template <typename S>
void zero_frozen_grads(ModelT<S>& model) {
    for (ParamT<S>* p : model.param_list()) {
        if (!p->trainable) {
            p->g.zero();
        } else if (p->train_row_begin > 0) {
            std::fill(p->g.a.begin(),
                      p->g.a.begin() + static_cast<size_t>(p->train_row_begin) * p->g.cols, S(0));
        }
    }
}

}  // namespace

LossReport train_step(Model& model, const std::vector<const TrainingView*>& batch, const TrainConfig& tc,
                      long long step) {
    validate(tc);
    model.zero_grads();

    Rng dropout_rng = Rng::derive(tc.seed ^ static_cast<uint64_t>(step), "dropout");
    Rng* drop = model.config().dropout > 0.0 ? &dropout_rng : nullptr;

    BatchLoss<float> bl = batch_loss_and_grads(model, batch, tc.lambda_infill, drop);

    LossReport rep;
    rep.step = step;
    rep.lr = lr_at(step, tc);
    rep.l_lm = bl.l_lm;
    rep.l_infill = bl.l_infill;
    rep.combined = bl.l_lm + tc.lambda_infill * bl.l_infill;
    rep.lm_tokens = bl.lm_tokens;
    rep.infill_tokens = bl.infill_tokens;
    rep.empty = (bl.lm_tokens + bl.infill_tokens == 0);

    if (!std::isfinite(rep.combined)) {
        std::string ids;
        for (const TrainingView* v : batch) ids += (ids.empty() ? "" : ",") + v->source_id;
        throw NumericalError("non-finite loss at step " + std::to_string(step) + " (lr=" +
                             std::to_string(rep.lr) + ", batch ids=" + ids + ")");
    }
    if (rep.empty) return rep;  // nothing to learn from

    zero_frozen_grads(model);

    // global-norm clip over trainable gradients
    if (tc.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (ParamT<float>* p : model.param_list()) {
            for (float g : p->g.a) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (norm > tc.grad_clip_norm) {
            const float scale = static_cast<float>(tc.grad_clip_norm / norm);
            for (ParamT<float>* p : model.param_list()) {
                for (float& g : p->g.a) g *= scale;
            }
        }
    }

    const double lr = rep.lr;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step) + 1.0);
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step) + 1.0);
    for (ParamT<float>* p : model.param_list()) {
        if (!p->trainable) continue;
        const size_t begin = static_cast<size_t>(p->train_row_begin) * p->w.cols;
        for (size_t i = begin; i < p->w.a.size(); ++i) {
            const double g = p->g.a[i];
            const double m = tc.beta1 * p->m.a[i] + (1.0 - tc.beta1) * g;
            const double v = tc.beta2 * p->v.a[i] + (1.0 - tc.beta2) * g * g;
            p->m.a[i] = static_cast<float>(m);
            p->v.a[i] = static_cast<float>(v);
            const double update = (m / bc1) / (std::sqrt(v / bc2) + tc.adam_eps) +
                                  tc.weight_decay * static_cast<double>(p->w.a[i]);
            p->w.a[i] = static_cast<float>(static_cast<double>(p->w.a[i]) - lr * update);
        }
    }
    model.sync_shadows();
    return rep;
}

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ModelConfig& cfg, const std::vector<TrainingView>& batch,
                           double lambda_infill, double eps, int min_samples, uint64_t sample_seed) {
    ModelConfig dcfg = cfg;
    dcfg.dropout = 0.0;  // finite differences need a deterministic loss
    ModelT<double> model(dcfg);
    std::vector<const TrainingView*> ptrs;
    for (const auto& v : batch) ptrs.push_back(&v);

    auto loss_only = [&]() {
        double sum_lm = 0.0, sum_infill = 0.0;
        long long n_lm = 0, n_infill = 0;
        for (const TrainingView* v : ptrs) {
            MatT<double> logits = model.forward(v->input_ids, v->prefix_len);
            LossValue lv = loss_cross_entropy(logits, v->labels);
            if (is_infill_kind(v->kind)) {
                sum_infill += lv.value * static_cast<double>(lv.labeled);
                n_infill += lv.labeled;
            } else {
                sum_lm += lv.value * static_cast<double>(lv.labeled);
                n_lm += lv.labeled;
            }
        }
        const double l_lm = n_lm ? sum_lm / static_cast<double>(n_lm) : 0.0;
        const double l_inf = n_infill ? sum_infill / static_cast<double>(n_infill) : 0.0;
        return l_lm + lambda_infill * l_inf;
    };

    model.zero_grads();
    batch_loss_and_grads(model, ptrs, lambda_infill, nullptr);

    auto params = model.param_list();
    std::vector<ParamT<double>*> eligible;
    for (auto* p : params) {
        if (p->trainable && p->count() > static_cast<size_t>(p->train_row_begin) * p->w.cols) {
            eligible.push_back(p);
        }
    }
    const int per_param =
        std::max(1, (min_samples + static_cast<int>(eligible.size()) - 1) / static_cast<int>(eligible.size()));

    GradCheckReport rep;
    Rng rng(mix64(sample_seed ^ 0x67726164ull));
    for (ParamT<double>* p : eligible) {
        const size_t begin = static_cast<size_t>(p->train_row_begin) * p->w.cols;
        double family_max = 0.0;
        for (int s = 0; s < per_param; ++s) {
            const size_t idx = begin + rng.below(p->w.a.size() - begin);
            const double orig = p->w.a[idx];
            p->w.a[idx] = orig + eps;
            model.sync_shadows();
            const double lp = loss_only();
            p->w.a[idx] = orig - eps;
            model.sync_shadows();
            const double lm = loss_only();
            p->w.a[idx] = orig;
            model.sync_shadows();
            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = p->g.a[idx];
            const double rel =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            family_max = std::max(family_max, rel);
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            ++rep.sampled;
        }
        rep.per_family[p->name] = family_max;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'C', 'L', 'Z', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtra& extra) {
    auto params = model.param_list();
    json tensors = json::array();
    for (const ParamT<float>* p : params) {
        tensors.push_back({{"name", p->name}, {"rows", p->w.rows}, {"cols", p->w.cols}});
    }
    json header{{"format", 1},
                {"model_config", model_config_json(model.config())},
                {"train_config", train_config_json(extra.train_config)},
                {"step", extra.step},
                {"config_hash", config_hash(model.config())},
                {"prefix_decode", extra.prefix_decode},
                {"regime", extra.regime},
                {"vocab", extra.vocab_lines},
                {"tensors", tensors}};
    const std::string hdr = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(kCkptMagic, 8);
    const uint64_t hlen = hdr.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    for (const ParamT<float>* p : params) {
        for (const MatT<float>* m : {&p->w, &p->m, &p->v}) {
            out.write(reinterpret_cast<const char*>(m->a.data()),
                      static_cast<std::streamsize>(m->a.size() * sizeof(float)));
        }
    }
    if (!out) throw DataError("short write: " + path);
}

namespace {

struct RawCheckpoint {
    json header;
    std::string payload;
};

RawCheckpoint read_raw_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw DataError(path + ": not a checkpoint file");
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    std::string hdr(hlen, '\0');
    in.read(hdr.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw DataError(path + ": truncated checkpoint header");
    RawCheckpoint rc;
    try {
        rc.header = json::parse(hdr);
    } catch (const json::exception& e) {
        throw DataError(path + ": bad checkpoint header: " + e.what());
    }
    std::ostringstream rest;
    rest << in.rdbuf();
    rc.payload = rest.str();
    return rc;
}

void fill_model_from_raw(Model& model, const RawCheckpoint& rc, const std::string& path) {
    auto params = model.param_list();
    const json& tensors = rc.header.at("tensors");
    if (tensors.size() != params.size()) throw DataError(path + ": tensor count mismatch");
    size_t off = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        ParamT<float>* p = params[i];
        const json& t = tensors[i];
        if (t.at("name").get<std::string>() != p->name || t.at("rows").get<int>() != p->w.rows ||
            t.at("cols").get<int>() != p->w.cols) {
            throw DataError(path + ": tensor layout mismatch at " + p->name);
        }
        for (MatT<float>* m : {&p->w, &p->m, &p->v}) {
            const size_t bytes = m->a.size() * sizeof(float);
            if (off + bytes > rc.payload.size()) throw DataError(path + ": truncated checkpoint payload");
            std::memcpy(m->a.data(), rc.payload.data() + off, bytes);
            off += bytes;
        }
    }
    if (off != rc.payload.size()) throw DataError(path + ": trailing bytes in checkpoint payload");
    model.sync_shadows();
}

CheckpointExtra extra_from_header(const json& h) {
    CheckpointExtra e;
    e.train_config = train_config_from_json(h.at("train_config"));
    e.step = h.at("step").get<long long>();
    e.prefix_decode = h.at("prefix_decode").get<bool>();
    e.regime = h.at("regime").get<std::string>();
    e.vocab_lines = h.at("vocab").get<std::vector<std::string>>();
    return e;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
    RawCheckpoint rc = read_raw_checkpoint(path);
    ModelConfig mc = model_config_from_json(rc.header.at("model_config"));
    LoadedCheckpoint lc{mc, extra_from_header(rc.header), Model(mc)};
    fill_model_from_raw(lc.model, rc, path);
    return lc;
}

void load_checkpoint_into(Model& model, const std::string& path, CheckpointExtra* extra) {
    RawCheckpoint rc = read_raw_checkpoint(path);
    const std::string stored = rc.header.at("config_hash").get<std::string>();
    const std::string own = config_hash(model.config());
    if (stored != own) {
        throw DataError(path + ": refusing to load, config hash mismatch (checkpoint " + stored +
                        ", model " + own + ")");
    }
    fill_model_from_raw(model, rc, path);
    if (extra) *extra = extra_from_header(rc.header);
}

// ---------------------------------------------------------------------------
// inference session
// ---------------------------------------------------------------------------

InferenceSession::InferenceSession(const Model& model, int capacity)
    : model_(&model), capacity_(capacity) {
    if (capacity < 1 || capacity > model.config().max_seq) {
        throw DataError("inference session: capacity must be in [1, max_seq]");
    }
    const int L = model.config().n_layers;
    kcache_.resize(static_cast<size_t>(L));
    vcache_.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        kcache_[static_cast<size_t>(l)].init(capacity, model.config().d_model);
        vcache_[static_cast<size_t>(l)].init(capacity, model.config().d_model);
    }
}

std::vector<float> InferenceSession::prefill(const std::vector<TokenId>& ids, int prefix_len) {
    if (ids.empty()) throw DataError("prefill: empty prompt");
    if (static_cast<int>(ids.size()) > capacity_) throw DataError("prefill: prompt exceeds capacity");
    if (len_ != 0) throw DataError("prefill: session already primed");

    TapeT<float> tape;
    MatT<float> logits = model_->forward(ids, prefix_len, &tape);
    const int T = static_cast<int>(ids.size());
    const int d = model_->config().d_model;
    for (int l = 0; l < model_->config().n_layers; ++l) {
        const auto& tb = tape.blocks[static_cast<size_t>(l)];
        for (int t = 0; t < T; ++t) {
            std::copy(tb.k.row(t), tb.k.row(t) + d, kcache_[static_cast<size_t>(l)].row(t));
            std::copy(tb.v.row(t), tb.v.row(t) + d, vcache_[static_cast<size_t>(l)].row(t));
        }
    }
    len_ = T;
    const float* last = logits.row(T - 1);
    return std::vector<float>(last, last + model_->config().vocab_size);
}

std::vector<float> InferenceSession::step(TokenId token) {
    if (len_ == 0) throw DataError("step: prefill first");
    if (len_ >= capacity_) throw DataError("step: session capacity exhausted");
    auto logits = forward_one(token, len_, len_);
    ++len_;
    return logits;
}

std::vector<float> InferenceSession::forward_one(TokenId token, int pos, int attend_up_to) {
    const ModelConfig& cfg = model_->config();
    if (token < 0 || token >= cfg.vocab_size) throw DataError("step: token id out of range");
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = d / H;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    std::vector<float> x(static_cast<size_t>(d));
    {
        const float* te = model_->tok_emb_w().row(token);
        const float* pe = model_->pos_emb_w().row(pos);
        for (int c = 0; c < d; ++c) x[static_cast<size_t>(c)] = te[c] + pe[c];
    }
    std::vector<float> norm(static_cast<size_t>(d)), q(static_cast<size_t>(d)), att(static_cast<size_t>(d)),
        proj(static_cast<size_t>(d));
    std::vector<float> scores(static_cast<size_t>(attend_up_to) + 1);
    std::vector<float> h1(static_cast<size_t>(cfg.d_ff));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const BlockT<float>& b = model_->blocks()[static_cast<size_t>(l)];
        MatT<float>& kc = kcache_[static_cast<size_t>(l)];
        MatT<float>& vc = vcache_[static_cast<size_t>(l)];

        ln_forward_row(b.ln1, x.data(), norm.data(), d);
        lin_forward_row(b.wq, norm.data(), q.data());
        lin_forward_row(b.wk, norm.data(), kc.row(pos));
        lin_forward_row(b.wv, norm.data(), vc.row(pos));

        std::fill(att.begin(), att.end(), 0.0f);
        for (int h = 0; h < H; ++h) {
            const int off = h * hd;
            float maxv = std::numeric_limits<float>::lowest();
            for (int j = 0; j <= attend_up_to; ++j) {
                const float* kj = kc.row(j) + off;
                float s = 0.0f;
                for (int c = 0; c < hd; ++c) s += q[static_cast<size_t>(off + c)] * kj[c];
                s *= inv_sqrt_hd;
                scores[static_cast<size_t>(j)] = s;
                maxv = std::max(maxv, s);
            }
            float denom = 0.0f;
            for (int j = 0; j <= attend_up_to; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - maxv);
                denom += scores[static_cast<size_t>(j)];
            }
            const float inv = 1.0f / denom;
            for (int j = 0; j <= attend_up_to; ++j) {
                const float wij = scores[static_cast<size_t>(j)] * inv;
                const float* vj = vc.row(j) + off;
                for (int c = 0; c < hd; ++c) att[static_cast<size_t>(off + c)] += wij * vj[c];
            }
        }
        lin_forward_row(b.wo, att.data(), proj.data());
        for (int c = 0; c < d; ++c) x[static_cast<size_t>(c)] += proj[static_cast<size_t>(c)];

        ln_forward_row(b.ln2, x.data(), norm.data(), d);
        lin_forward_row(b.fc1, norm.data(), h1.data());
        for (auto& v : h1) v = v > 0.0f ? v : 0.0f;
        lin_forward_row(b.fc2, h1.data(), proj.data());
        for (int c = 0; c < d; ++c) x[static_cast<size_t>(c)] += proj[static_cast<size_t>(c)];
    }
    ln_forward_row(model_->lnf(), x.data(), norm.data(), d);
    std::vector<float> logits(static_cast<size_t>(cfg.vocab_size));
    lin_forward_row(model_->head(), norm.data(), logits.data());
    return logits;
}

}  // namespace cloze
