#pragma once

// Joint forecasting + imputation training, schedule, early stopping,
// masked metrics, ablation variants and cross-dataset evaluation.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "usts/dataset.hpp"
#include "usts/model.hpp"

namespace usts {

struct TrainConfig {
    double alpha = 0.5;
    double lr = 3e-4;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 2000;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t patience = 5;
    std::size_t batch_size = 8;
    std::size_t max_epochs = 100;
    std::size_t eval_batch = 16;
    std::size_t stride = 0;  // window stride, 0 = horizon
    std::uint64_t seed = 0;
    data::MaskOptions mask;

    void validate() const {
        if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
        if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
        if (total_steps == 0) throw ConfigError("total_steps must be positive");
        if (warmup_steps >= total_steps) {
            throw ConfigError("warmup_steps (" + std::to_string(warmup_steps) + ") must be below total_steps (" +
                              std::to_string(total_steps) + ")");
        }
        if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(adam_eps > 0)) throw ConfigError("Adam epsilon must be positive");
        if (batch_size == 0 || eval_batch == 0) throw ConfigError("batch sizes must be positive");
        if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
        data::validate(mask);
    }
};

// -------------------------------------------------------------------- losses

/// Mean of (y - target)^2 over the entries with keep != 0; 0 when none are kept.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& y, const Tensor<T>& target, const std::vector<std::uint8_t>& keep,
                     std::size_t* kept = nullptr) {
    if (y.shape() != target.shape()) {
        throw DimensionError("loss: output " + shape_str(y.shape()) + " vs target " + shape_str(target.shape()));
    }
    if (keep.size() != y.numel()) throw DimensionError("loss: selection size does not match output");
    const auto n = static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(), [](auto k) { return k != 0; }));
    if (kept) *kept = n;
    if (n == 0) return Tensor<T>::scalar(T(0));
    auto sq = ops::square(ops::sub(y, target));
    auto sel = ops::where(keep, sq, Tensor<T>::zeros(sq.shape()));
    return ops::scale(ops::sum(sel), T(1) / static_cast<T>(n));
}

/// Forecast MSE; entries flagged in `interp` are excluded.
template <class T>
Tensor<T> loss_pred(const Tensor<T>& y, const Tensor<T>& y_true, const std::vector<std::uint8_t>* interp = nullptr) {
    std::vector<std::uint8_t> keep(y.numel(), 1);
    if (interp) {
        if (interp->size() != keep.size()) throw DimensionError("loss: interp flags do not match output");
        for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (*interp)[i] ? 0 : 1;
    }
    return masked_mse(y, y_true, keep);
}

/// Reconstruction MSE over the masked entries (mask == 0) only.
template <class T>
Tensor<T> loss_imp(const Tensor<T>& y, const Tensor<T>& x_true, const std::vector<std::uint8_t>& mask,
                   const std::vector<std::uint8_t>* interp = nullptr) {
    if (mask.size() != y.numel()) throw DimensionError("loss: mask does not match output");
    if (interp && interp->size() != mask.size()) throw DimensionError("loss: interp flags do not match output");
    std::vector<std::uint8_t> keep(mask.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = mask[i] == 0 && !(interp && (*interp)[i]) ? 1 : 0;
    std::size_t n = 0;
    auto l = masked_mse(y, x_true, keep, &n);
    if (n == 0) spdlog::warn("imputation loss: no masked entries; using 0");
    return l;
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& l_pred, const Tensor<T>& l_imp, double alpha) {
    return ops::add(ops::scale(l_pred, static_cast<T>(alpha)), ops::scale(l_imp, static_cast<T>(1.0 - alpha)));
}

// ----------------------------------------------------------------- schedule

/// Linear warm-up to `lr`, cosine decay to 0 at total_steps, 0 afterwards.
inline double lr_at(std::size_t step, const TrainConfig& c) {
    if (step < c.warmup_steps) return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    if (step >= c.total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
    return c.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------- optimizer

/// Adam with decoupled weight decay. Decay applies to trainable matrices
/// (rank >= 2) only; parameters without a gradient are left untouched.
template <class T>
class AdamW {
public:
    explicit AdamW(const TrainConfig& c) : beta1_(c.beta1), beta2_(c.beta2), eps_(c.adam_eps), wd_(c.weight_decay) {}

    void step(ParameterSet<T>& ps, double lr) {
        auto& all = ps.all();
        if (m_.empty()) {
            m_.resize(all.size());
            v_.resize(all.size());
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < all.size(); ++i) {
            auto& p = all[i];
            if (!p.trainable || !p.value.has_grad()) continue;
            const bool move = lr != 0.0;
            auto& m = m_[i];
            auto& v = v_[i];
            if (m.empty()) {
                m.assign(p.value.numel(), 0.0);
                v.assign(p.value.numel(), 0.0);
            }
            const auto g = p.value.grad();
            auto w = p.value.mutable_data();
            const double decay = p.value.rank() >= 2 ? wd_ : 0.0;
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
                const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
                const double wj = static_cast<double>(w[j]);
                if (move) w[j] = static_cast<T>(wj - lr * decay * wj - lr * update);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    double beta1_, beta2_, eps_, wd_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ------------------------------------------------------------- data helpers

template <class T>
Tensor<T> to_tensor(const std::vector<float>& v, Shape shape) {
    return Tensor<T>(std::move(shape), std::vector<T>(v.begin(), v.end()));
}

template <class T>
void check_geometry(const Model<T>& model, const data::NodeSeries& s) {
    const auto& c = model.config;
    if (s.nodes != c.nodes || s.channels != c.channels) {
        throw ConfigError("dataset has " + std::to_string(s.nodes) + " nodes x " + std::to_string(s.channels) +
                          " channels, model expects " + std::to_string(c.nodes) + " x " +
                          std::to_string(c.channels));
    }
}

inline data::WindowSpec window_spec(const ModelConfig& c, std::size_t stride = 0) {
    return {c.history, c.horizon, stride};
}

/// One mask per sample, concatenated into [B, L, N, C] order.
inline std::vector<std::uint8_t> batch_mask(std::size_t batch, const ModelConfig& c, const data::MaskOptions& o,
                                            Rng& rng) {
    std::vector<std::uint8_t> out;
    out.reserve(batch * c.history * c.nodes * c.channels);
    for (std::size_t b = 0; b < batch; ++b) {
        auto d = data::gen_mask(c.history, c.nodes, c.channels, o, rng);
        out.insert(out.end(), d.mask.begin(), d.mask.end());
    }
    return out;
}

template <class T>
struct StepLosses {
    Tensor<T> pred, imp, total;
};

/// Prediction view and masked imputation view of one batch.
template <class T>
StepLosses<T> joint_losses(const Model<T>& model, const data::Batch& b, double alpha, const data::MaskOptions& mo,
                           Rng& mask_rng, Rng* scale_rng) {
    const auto& c = model.config;
    auto x = to_tensor<T>(b.x, {b.size, c.history, c.nodes, c.channels});
    auto y = to_tensor<T>(b.y, {b.size, c.horizon, c.nodes, c.channels});
    ForwardOptions<T> opt;
    opt.rng = scale_rng;
    StepLosses<T> l;
    auto rp = model.forward(Task::Predict, x, nullptr, b.times, opt);
    l.pred = loss_pred(rp.y, y, &b.y_interp);
    auto mask = batch_mask(b.size, c, mo, mask_rng);
    auto ri = model.forward(Task::Impute, x, &mask, b.times, opt);
    l.imp = loss_imp(ri.y, x, mask, &b.x_interp);
    l.total = total_loss(l.pred, l.imp, alpha);
    return l;
}

// --------------------------------------------------------------------- fit

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    double loss_pred = 0;
    double loss_imp = 0;
    double loss_total = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    bool improved = false;
};

struct TrainState {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool stopped_early = false;
    double wall_seconds = 0;
};

/// Patience counter on a loss that should decrease.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Returns true when `loss` is a new best.
    bool observe(double loss) {
        if (loss < best_) {
            best_ = loss;
            bad_ = 0;
            return true;
        }
        ++bad_;
        return false;
    }
    bool should_stop() const { return patience_ > 0 && bad_ >= patience_; }
    double best() const { return best_; }

private:
    std::size_t patience_;
    std::size_t bad_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

template <class T>
struct FitHooks {
    /// Replaces the validation criterion when set.
    std::function<double(const Model<T>&, std::size_t epoch)> validation;
    std::function<void(const Model<T>&, const EpochRecord&)> on_epoch;
    std::function<void(const StepRecord&)> on_step;
};

template <class T>
std::vector<std::vector<T>> snapshot(const ParameterSet<T>& ps) {
    std::vector<std::vector<T>> out;
    for (const auto& p : ps.all()) out.push_back(p.value.values());
    return out;
}

template <class T>
void restore(ParameterSet<T>& ps, const std::vector<std::vector<T>>& snap) {
    auto& all = ps.all();
    if (snap.size() != all.size()) throw ContractError("snapshot does not match the parameter set");
    for (std::size_t i = 0; i < all.size(); ++i) std::copy(snap[i].begin(), snap[i].end(), all[i].value.mutable_data().begin());
}

/// Mean joint loss over windows in evaluation mode (u = 0.5, seeded masks).
template <class T>
double validation_loss(const Model<T>& model, const data::NodeSeries& s, const std::vector<std::size_t>& starts,
                       const TrainConfig& tc) {
    if (starts.empty()) throw EmptyDatasetError("validation split has no windows");
    NoGradGuard ng;
    Rng mask_rng(tc.seed ^ 0x5eedULL);
    const auto w = window_spec(model.config, tc.stride);
    double sum = 0;
    for (std::size_t i = 0; i < starts.size(); i += tc.eval_batch) {
        std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(i),
                                       starts.begin() + static_cast<std::ptrdiff_t>(std::min(i + tc.eval_batch, starts.size())));
        auto l = joint_losses(model, data::make_batch(s, chunk, w), tc.alpha, tc.mask, mask_rng, nullptr);
        sum += static_cast<double>(l.total.item()) * static_cast<double>(chunk.size());
    }
    return sum / static_cast<double>(starts.size());
}

/// Installs the training-range adjacency and medians, then trains.
template <class T>
TrainState fit(Model<T>& model, const data::NodeSeries& s, const TrainConfig& tc, const FitHooks<T>& hooks = {}) {
    tc.validate();
    check_geometry(model, s);
    const auto started = std::chrono::steady_clock::now();
    const auto w = window_spec(model.config, tc.stride);
    const auto sets = data::split_and_window(s, w);
    if (sets.train.empty()) throw EmptyDatasetError("training split has no windows");
    model.set_adjacency(build_adjacency<T>(s, data::split_bounds(s.steps).train_end));
    model.set_medians(s.median);

    Rng rng(tc.seed);
    AdamW<T> opt(tc);
    EarlyStopping stopper(tc.patience);
    TrainState st;
    std::vector<std::vector<T>> best;
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    std::size_t step = 0;
    auto order = sets.train;

    for (std::size_t epoch = 1; epoch <= tc.max_epochs && step < tc.total_steps; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0;
        std::size_t epoch_steps = 0;
        for (std::size_t i = 0; i < order.size() && step < tc.total_steps; i += tc.batch_size) {
            std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(i),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(i + tc.batch_size, order.size())));
            auto l = joint_losses(model, data::make_batch(s, chunk, w), tc.alpha, tc.mask, rng, &rng);
            const double total = static_cast<double>(l.total.item());
            if (!std::isfinite(total)) {
                throw NonFiniteError(fmt::format("non-finite training loss at step {} (last finite loss {:.9g})",
                                                 step + 1, last_finite));
            }
            last_finite = total;
            l.total.backward();
            ++step;
            const double lr = lr_at(step, tc);
            opt.step(model.params, lr);
            model.params.zero_grad();
            StepRecord rec{step, epoch, lr, static_cast<double>(l.pred.item()), static_cast<double>(l.imp.item()), total};
            st.steps.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
            epoch_sum += total;
            ++epoch_steps;
        }
        EpochRecord er;
        er.epoch = epoch;
        er.train_loss = epoch_steps ? epoch_sum / static_cast<double>(epoch_steps) : 0.0;
        er.val_loss = hooks.validation ? hooks.validation(model, epoch) : validation_loss(model, s, sets.val, tc);
        er.improved = stopper.observe(er.val_loss);
        if (er.improved) {
            best = snapshot(model.params);
            st.best_epoch = epoch;
            st.best_val = er.val_loss;
        }
        st.epochs.push_back(er);
        spdlog::info("epoch {} train {:.6g} val {:.6g}{}", epoch, er.train_loss, er.val_loss, er.improved ? " *" : "");
        if (hooks.on_epoch) hooks.on_epoch(model, er);
        if (stopper.should_stop()) {
            st.stopped_early = true;
            break;
        }
    }
    if (!best.empty()) restore(model.params, best);
    st.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return st;
}

// ------------------------------------------------------------------ metrics

/// Compensated running sum.
struct KahanSum {
    double sum = 0, comp = 0;
    void add(double v) {
        const double y = v - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

struct ChannelMetrics {
    double mae = 0, rmse = 0;              // normalized scale
    double mae_denorm = 0, rmse_denorm = 0;
    std::size_t count = 0;
};

struct MetricReport {
    Task task = Task::Predict;
    std::vector<ChannelMetrics> channels;
    ChannelMetrics macro;
    std::size_t evaluated = 0;
    std::size_t masked_count = 0;
    std::size_t excluded_interp = 0;
    std::size_t windows = 0;
    double wall_seconds = 0;
    std::size_t params_trainable = 0;
    std::size_t params_total = 0;
};

/// Accumulates residuals per channel.
class MetricAccumulator {
public:
    explicit MetricAccumulator(std::size_t channels) : abs_(channels), sq_(channels), abs_d_(channels), sq_d_(channels), n_(channels, 0) {}

    void add(std::size_t channel, double residual, double median) {
        abs_[channel].add(std::abs(residual));
        sq_[channel].add(residual * residual);
        const double rd = residual * median;
        abs_d_[channel].add(std::abs(rd));
        sq_d_[channel].add(rd * rd);
        ++n_[channel];
    }

    std::size_t count() const { return std::accumulate(n_.begin(), n_.end(), std::size_t{0}); }

    void finish(MetricReport& r) const {
        r.channels.assign(n_.size(), {});
        std::size_t used = 0;
        for (std::size_t c = 0; c < n_.size(); ++c) {
            auto& m = r.channels[c];
            m.count = n_[c];
            if (n_[c] == 0) {
                spdlog::warn("channel {} has no evaluable entries", c);
                continue;
            }
            const double n = static_cast<double>(n_[c]);
            m.mae = abs_[c].sum / n;
            m.rmse = std::sqrt(sq_[c].sum / n);
            m.mae_denorm = abs_d_[c].sum / n;
            m.rmse_denorm = std::sqrt(sq_d_[c].sum / n);
            r.macro.mae += m.mae;
            r.macro.rmse += m.rmse;
            r.macro.mae_denorm += m.mae_denorm;
            r.macro.rmse_denorm += m.rmse_denorm;
            r.macro.count += m.count;
            ++used;
        }
        if (used) {
            const double k = static_cast<double>(used);
            r.macro.mae /= k;
            r.macro.rmse /= k;
            r.macro.mae_denorm /= k;
            r.macro.rmse_denorm /= k;
        }
    }

private:
    std::vector<KahanSum> abs_, sq_, abs_d_, sq_d_;
    std::vector<std::size_t> n_;
};

struct EvalOptions {
    std::size_t batch = 16;
    std::size_t stride = 0;
    std::uint64_t seed = 0;  // imputation mask draws
    data::MaskOptions mask;
};

/// Evaluation-mode metrics over the given windows. Prediction scores every
/// future entry; imputation scores the masked entries. Interpolated entries
/// never count.
template <class T>
MetricReport evaluate(const Model<T>& model, const data::NodeSeries& s, const std::vector<std::size_t>& starts,
                      Task task, const EvalOptions& eo = {}) {
    check_geometry(model, s);
    if (starts.empty()) throw EmptyDatasetError("evaluation set has no windows");
    if (eo.batch == 0) throw ConfigError("evaluation batch size must be positive");
    const auto started = std::chrono::steady_clock::now();
    const auto& c = model.config;
    const auto w = window_spec(c, eo.stride);
    NoGradGuard ng;
    Rng mask_rng(eo.seed);
    MetricAccumulator acc(c.channels);
    MetricReport r;
    r.task = task;
    r.windows = starts.size();
    for (std::size_t i = 0; i < starts.size(); i += eo.batch) {
        std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(i),
                                       starts.begin() + static_cast<std::ptrdiff_t>(std::min(i + eo.batch, starts.size())));
        const auto b = data::make_batch(s, chunk, w);
        auto x = to_tensor<T>(b.x, {b.size, c.history, c.nodes, c.channels});
        if (task == Task::Predict) {
            const auto out = model.forward(task, x, nullptr, b.times).y.values();
            for (std::size_t k = 0; k < out.size(); ++k) {
                if (b.y_interp[k]) {
                    ++r.excluded_interp;
                    continue;
                }
                const std::size_t ch = k % c.channels, node = (k / c.channels) % c.nodes;
                acc.add(ch, static_cast<double>(out[k]) - static_cast<double>(b.y[k]), s.median[node * c.channels + ch]);
            }
        } else {
            const auto mask = batch_mask(b.size, c, eo.mask, mask_rng);
            const auto out = model.forward(task, x, &mask, b.times).y.values();
            for (std::size_t k = 0; k < out.size(); ++k) {
                if (mask[k]) continue;
                ++r.masked_count;
                if (b.x_interp[k]) {
                    ++r.excluded_interp;
                    continue;
                }
                const std::size_t ch = k % c.channels, node = (k / c.channels) % c.nodes;
                acc.add(ch, static_cast<double>(out[k]) - static_cast<double>(b.x[k]), s.median[node * c.channels + ch]);
            }
        }
    }
    if (acc.count() == 0) throw EmptyDatasetError("evaluation set has no scorable entries");
    acc.finish(r);
    r.evaluated = acc.count();
    r.params_trainable = model.params.count(true);
    r.params_total = model.params.count(false);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

template <class T>
MetricReport evaluate_split(const Model<T>& model, const data::NodeSeries& s, data::Split split, Task task,
                            const EvalOptions& eo = {}) {
    const auto sets = data::split_and_window(s, window_spec(model.config, eo.stride));
    return evaluate(model, s, sets.get(split), task, eo);
}

// ---------------------------------------------------------------- zero-shot

struct ZeroShotOptions {
    bool recompute_adjacency = true;     // from the target's training range
    bool reuse_source_medians = false;   // renormalize the target with the source medians
    data::Split split = data::Split::Test;
    EvalOptions eval;
};

/// Evaluates a trained model on another dataset without updating any parameter.
template <class T>
MetricReport zero_shot(Model<T>& model, const data::NodeSeries& target, Task task, const ZeroShotOptions& zo = {}) {
    if (target.nodes != model.config.nodes) {
        throw ConfigError("zero-shot: target has " + std::to_string(target.nodes) + " nodes, source model has " +
                          std::to_string(model.config.nodes));
    }
    check_geometry(model, target);
    const data::NodeSeries* ds = &target;
    data::NodeSeries renormed;
    if (zo.reuse_source_medians) {
        renormed = target;
        const auto& mv = model.medians.values();
        data::renormalize(renormed, std::vector<double>(mv.begin(), mv.end()));
        ds = &renormed;
    }
    if (!zo.recompute_adjacency) return evaluate_split(model, *ds, zo.split, task, zo.eval);

    struct Restore {
        Model<T>& m;
        Tensor<T> saved;
        ~Restore() { m.set_adjacency(saved); }
    } guard{model, Tensor<T>(model.bias.adjacency.shape(), model.bias.adjacency.values())};
    model.set_adjacency(build_adjacency<T>(*ds, data::split_bounds(ds->steps).train_end));
    return evaluate_split(model, *ds, zo.split, task, zo.eval);
}

// ----------------------------------------------------------------- ablation

enum class Ablation { None, Ste, Gs, Ge };

inline Ablation parse_ablation(std::string_view tag) {
    std::string t(tag);
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (t == "none" || t == "full") return Ablation::None;
    if (t == "ste") return Ablation::Ste;
    if (t == "gs") return Ablation::Gs;
    if (t == "ge") return Ablation::Ge;
    throw ConfigError("unknown ablation '" + std::string(tag) + "' (expected ste, gs or ge)");
}

inline std::string_view ablation_name(Ablation a) {
    switch (a) {
        case Ablation::None: return "full";
        case Ablation::Ste: return "ste";
        case Ablation::Gs: return "gs";
        case Ablation::Ge: return "ge";
    }
    return "?";
}

inline ModelConfig ablate(ModelConfig cfg, Ablation which) {
    switch (which) {
        case Ablation::None: break;
        case Ablation::Ste: cfg.temporal_embedding = false; break;
        case Ablation::Gs: cfg.guidance = false; break;
        case Ablation::Ge: cfg.graph = false; break;
    }
    return cfg;
}

inline ModelConfig ablate(const ModelConfig& cfg, std::string_view which) { return ablate(cfg, parse_ablation(which)); }

// ------------------------------------------------------------------ output

inline std::string fmt_g(double v) { return fmt::format("{:.9g}", v); }

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricReport>& reports, bool header = true) {
    if (header) out << "task,channel,metric,scale,value\n";
    for (const auto& r : reports) {
        auto rows = [&](const std::string& ch, const ChannelMetrics& m) {
            const auto task = task_name(r.task);
            out << task << ',' << ch << ",mae,normalized," << fmt_g(m.mae) << '\n';
            out << task << ',' << ch << ",rmse,normalized," << fmt_g(m.rmse) << '\n';
            out << task << ',' << ch << ",mae,denormalized," << fmt_g(m.mae_denorm) << '\n';
            out << task << ',' << ch << ",rmse,denormalized," << fmt_g(m.rmse_denorm) << '\n';
        };
        for (std::size_t c = 0; c < r.channels.size(); ++c) rows(std::to_string(c), r.channels[c]);
        rows("macro", r.macro);
    }
}

inline void write_trajectory_csv(std::ostream& out, const TrainState& st) {
    out << "step,epoch,lr,loss_pred,loss_imp,loss_total\n";
    for (const auto& s : st.steps)
        out << s.step << ',' << s.epoch << ',' << fmt_g(s.lr) << ',' << fmt_g(s.loss_pred) << ','
            << fmt_g(s.loss_imp) << ',' << fmt_g(s.loss_total) << '\n';
}

inline void write_epochs_csv(std::ostream& out, const TrainState& st) {
    out << "epoch,train_loss,val_loss,improved\n";
    for (const auto& e : st.epochs)
        out << e.epoch << ',' << fmt_g(e.train_loss) << ',' << fmt_g(e.val_loss) << ',' << (e.improved ? 1 : 0) << '\n';
}

}  // namespace usts
