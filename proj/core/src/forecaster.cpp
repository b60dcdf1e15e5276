#include "deconf/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "deconf/checkpoint.hpp"
#include "deconf/textio.hpp"

namespace deconf {

std::string arch_name(Arch a) {
    switch (a) {
        case Arch::linear: return "linear";
        case Arch::mlp: return "mlp";
        case Arch::attention: return "attention";
    }
    throw config_error("unknown architecture enum value");
}

Arch arch_from_name(const std::string& name) {
    if (name == "linear") return Arch::linear;
    if (name == "mlp") return Arch::mlp;
    if (name == "attention") return Arch::attention;
    throw config_error("unknown architecture '" + name + "' (expected linear, mlp or attention)");
}

void ForecasterConfig::validate() const {
    if (sl < 1) {
        throw config_error("sl must be >= 1, got " + std::to_string(sl));
    }
    if (pl < 1) {
        throw config_error("pl must be >= 1, got " + std::to_string(pl));
    }
    if (hidden_dim < 1) {
        throw config_error("hidden_dim must be >= 1, got " + std::to_string(hidden_dim));
    }
    if (!(learning_rate > 0.0)) {
        throw config_error("learning_rate must be > 0, got " + std::to_string(learning_rate));
    }
    if (epochs < 1) {
        throw config_error("epochs must be >= 1, got " + std::to_string(epochs));
    }
    if (batch_size < 1) {
        throw config_error("batch_size must be >= 1, got " + std::to_string(batch_size));
    }
    if (reg_lambda < 0.0) {
        throw config_error("reg_lambda must be >= 0, got " + std::to_string(reg_lambda));
    }
    if (train_stride < 1) {
        throw config_error("train_stride must be >= 1, got " + std::to_string(train_stride));
    }
}

namespace {

Eigen::MatrixXd sinusoidal_encoding(int positions, int dim) {
    Eigen::MatrixXd pe(positions, dim);
    for (int pos = 0; pos < positions; ++pos) {
        for (int c = 0; c < dim; ++c) {
            const int pair = c / 2;
            const double denom = std::pow(10000.0, 2.0 * pair / static_cast<double>(dim));
            const double angle = pos / denom;
            pe(pos, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

void append_window_rows(const Dataset& ds, const std::vector<Eigen::MatrixXd>* zhat,
                        const ForecasterConfig& cfg, int s, int stride,
                        std::vector<Window>& out) {
    const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(s)];
    const Eigen::Index T = traj.steps();
    const Eigen::Index k = traj.dims();
    const Eigen::Index zd = cfg.use_confounder ? (*zhat)[static_cast<std::size_t>(s)].cols() : 0;
    const Eigen::Index d = 2 * k + zd;
    if (cfg.use_confounder && (*zhat)[static_cast<std::size_t>(s)].rows() != T) {
        throw shape_error("confounder series for sequence " + std::to_string(s) + " has " +
                          std::to_string((*zhat)[static_cast<std::size_t>(s)].rows()) +
                          " steps, trajectory has " + std::to_string(T));
    }
    const Eigen::Index last = T - cfg.sl - cfg.pl;
    for (Eigen::Index o = 0; o <= last; o += stride) {
        Window w;
        w.seq_index = s;
        w.offset = static_cast<int>(o);
        w.inputs.resize(cfg.sl, d);
        w.inputs.leftCols(k) = traj.X.middleRows(o, cfg.sl);
        w.inputs.middleCols(k, k) = traj.A.middleRows(o, cfg.sl);
        if (zd > 0) {
            w.inputs.rightCols(zd) =
                (*zhat)[static_cast<std::size_t>(s)].middleRows(o, cfg.sl);
        }
        w.target = traj.Y.segment(o + cfg.sl, cfg.pl);
        out.push_back(std::move(w));
    }
}

}  // namespace

std::vector<Window> make_windows_for(const Dataset& ds,
                                     const std::vector<Eigen::MatrixXd>* zhat,
                                     const ForecasterConfig& cfg,
                                     const std::vector<int>& seq_indices, int stride) {
    cfg.validate();
    if (stride < 1) {
        throw config_error("window stride must be >= 1");
    }
    if (cfg.use_confounder &&
        (zhat == nullptr || zhat->size() != ds.trajectories.size())) {
        throw config_error("use_confounder is set but no confounder series were provided");
    }
    std::vector<Window> out;
    for (int s : seq_indices) {
        if (s < 0 || static_cast<std::size_t>(s) >= ds.trajectories.size()) {
            throw config_error("sequence index " + std::to_string(s) + " out of range");
        }
        append_window_rows(ds, zhat, cfg, s, stride, out);
    }
    return out;
}

std::vector<Window> make_windows(const Dataset& ds, const std::vector<Eigen::MatrixXd>* zhat,
                                 const ForecasterConfig& cfg, int stride) {
    std::vector<int> all(ds.trajectories.size());
    std::iota(all.begin(), all.end(), 0);
    return make_windows_for(ds, zhat, cfg, all, stride);
}

void Normalizer::apply(std::vector<Window>& windows) const {
    for (Window& w : windows) {
        if (w.inputs.cols() != mean.size()) {
            throw shape_error("normalizer has " + std::to_string(mean.size()) +
                              " channels, window has " + std::to_string(w.inputs.cols()));
        }
        w.inputs = (w.inputs.rowwise() - mean.transpose()).array().rowwise() /
                   stdev.transpose().array();
        w.target = (w.target.array() - y_mean) / y_std;
    }
}

Normalizer fit_normalizer(const Dataset& ds, const std::vector<int>& seq_indices,
                          const std::vector<Eigen::MatrixXd>* zhat) {
    if (seq_indices.empty()) {
        throw config_error("fit_normalizer: no sequences given");
    }
    const Eigen::Index k = ds.dims();
    const Eigen::Index zd =
        (zhat != nullptr && !zhat->empty()) ? (*zhat)[static_cast<std::size_t>(seq_indices[0])].cols() : 0;
    const Eigen::Index d = 2 * k + zd;

    Eigen::Index rows = 0;
    for (int s : seq_indices) {
        rows += ds.trajectories[static_cast<std::size_t>(s)].steps();
    }
    Eigen::MatrixXd pooled(rows, d);
    Eigen::VectorXd y(rows);
    Eigen::Index at = 0;
    for (int s : seq_indices) {
        const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(s)];
        const Eigen::Index T = traj.steps();
        pooled.block(at, 0, T, k) = traj.X;
        pooled.block(at, k, T, k) = traj.A;
        if (zd > 0) {
            pooled.block(at, 2 * k, T, zd) = (*zhat)[static_cast<std::size_t>(s)];
        }
        y.segment(at, T) = traj.Y;
        at += T;
    }

    Normalizer n;
    n.mean = pooled.colwise().mean();
    n.stdev.resize(d);
    for (Eigen::Index c = 0; c < d; ++c) {
        const double var = (pooled.col(c).array() - n.mean(c)).square().mean();
        const double sd = std::sqrt(var);
        n.stdev(c) = (sd < 1e-12) ? 1.0 : sd;
    }
    n.y_mean = y.mean();
    const double y_sd = std::sqrt((y.array() - n.y_mean).square().mean());
    n.y_std = (y_sd < 1e-12) ? 1.0 : y_sd;
    return n;
}

SplitIndices split_by_sequence(std::size_t n_sequences, std::uint64_t seed) {
    std::vector<int> order(n_sequences);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed).child(0x5EA1);
    std::shuffle(order.begin(), order.end(), rng.engine());

    const std::size_t n_train = n_sequences * 70 / 100;
    const std::size_t n_val = n_sequences * 15 / 100;
    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    return s;
}

struct Forecaster::Cache {
    Eigen::VectorXd v;                  // flattened input (linear, mlp)
    Eigen::VectorXd h;                  // mlp hidden activation
    Eigen::MatrixXd P, Q, K, V, R;      // attention intermediates
    Eigen::VectorXd pooled;
};

Forecaster::Forecaster(const ForecasterConfig& cfg, int input_dim)
    : cfg_(cfg), input_dim_(input_dim) {
    cfg.validate();
    if (input_dim < 1) {
        throw config_error("forecaster input dimension must be >= 1");
    }
    const int flat = cfg.sl * input_dim;
    const int H = cfg.hidden_dim;
    std::vector<std::string> weights;
    switch (cfg.arch) {
        case Arch::linear:
            params_.add("linear.W", cfg.pl, flat);
            params_.add("linear.b", cfg.pl);
            weights = {"linear.W"};
            break;
        case Arch::mlp:
            params_.add("l1.W", H, flat);
            params_.add("l1.b", H);
            params_.add("l2.W", cfg.pl, H);
            params_.add("l2.b", cfg.pl);
            weights = {"l1.W", "l2.W"};
            break;
        case Arch::attention:
            params_.add("embed.W", H, input_dim);
            params_.add("embed.b", H);
            params_.add("attn.Wq", H, H);
            params_.add("attn.Wk", H, H);
            params_.add("attn.Wv", H, H);
            params_.add("out.W", cfg.pl, H);
            params_.add("out.b", cfg.pl);
            weights = {"embed.W", "attn.Wq", "attn.Wk", "attn.Wv", "out.W"};
            pos_enc_ = sinusoidal_encoding(cfg.sl, H);
            break;
    }

    Rng rng(cfg.seed);
    for (const std::string& name : weights) {
        Eigen::MatrixXd& m = params_.at(name).value;
        const double s = 1.0 / std::sqrt(static_cast<double>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                m(r, c) = rng.uniform(-s, s);
            }
        }
    }

    // Default normalizer is the identity until training fits one.
    norm_.mean = Eigen::VectorXd::Zero(input_dim);
    norm_.stdev = Eigen::VectorXd::Ones(input_dim);
}

Eigen::VectorXd Forecaster::forward(const Eigen::MatrixXd& inputs, Cache* cache) const {
    if (inputs.rows() != cfg_.sl || inputs.cols() != input_dim_) {
        std::ostringstream os;
        os << "window inputs are " << inputs.rows() << "x" << inputs.cols() << ", model expects "
           << cfg_.sl << "x" << input_dim_;
        throw shape_error(os.str());
    }
    Cache local;
    Cache& c = cache ? *cache : local;

    switch (cfg_.arch) {
        case Arch::linear: {
            c.v = inputs.reshaped<Eigen::RowMajor>().transpose();
            return params_.at("linear.W").value * c.v + params_.at("linear.b").value.col(0);
        }
        case Arch::mlp: {
            c.v = inputs.reshaped<Eigen::RowMajor>().transpose();
            c.h = ((params_.at("l1.W").value * c.v + params_.at("l1.b").value.col(0))
                       .array()
                       .tanh())
                      .matrix();
            return params_.at("l2.W").value * c.h + params_.at("l2.b").value.col(0);
        }
        case Arch::attention: {
            const Eigen::MatrixXd& We = params_.at("embed.W").value;
            const Eigen::VectorXd be = params_.at("embed.b").value.col(0);
            c.P = (inputs * We.transpose()).rowwise() + be.transpose();
            c.P += pos_enc_;
            c.Q = c.P * params_.at("attn.Wq").value.transpose();
            c.K = c.P * params_.at("attn.Wk").value.transpose();
            c.V = c.P * params_.at("attn.Wv").value.transpose();
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));
            Eigen::MatrixXd scores = c.Q * c.K.transpose() * inv_sqrt;
            c.R.resize(scores.rows(), scores.cols());
            for (Eigen::Index i = 0; i < scores.rows(); ++i) {
                const double m = scores.row(i).maxCoeff();
                Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
                c.R.row(i) = (e / e.sum()).matrix();
            }
            c.pooled = (c.R * c.V).colwise().mean();
            return params_.at("out.W").value * c.pooled + params_.at("out.b").value.col(0);
        }
    }
    throw config_error("unknown architecture enum value");
}

Eigen::MatrixXd Forecaster::backward(const Eigen::MatrixXd& inputs, const Cache& c,
                                     const Eigen::VectorXd& dy, bool want_dinputs) {
    const int d = input_dim_;
    switch (cfg_.arch) {
        case Arch::linear: {
            Param& W = params_.at("linear.W");
            params_.at("linear.b").grad.col(0) += dy;
            W.grad += dy * c.v.transpose();
            if (!want_dinputs) {
                return {};
            }
            Eigen::VectorXd dv = W.value.transpose() * dy;
            return dv.reshaped<Eigen::RowMajor>(cfg_.sl, d);
        }
        case Arch::mlp: {
            Param& W2 = params_.at("l2.W");
            params_.at("l2.b").grad.col(0) += dy;
            W2.grad += dy * c.h.transpose();
            Eigen::VectorXd dh = W2.value.transpose() * dy;
            Eigen::VectorXd da = (dh.array() * (1.0 - c.h.array().square())).matrix();
            Param& W1 = params_.at("l1.W");
            params_.at("l1.b").grad.col(0) += da;
            W1.grad += da * c.v.transpose();
            if (!want_dinputs) {
                return {};
            }
            Eigen::VectorXd dv = W1.value.transpose() * da;
            return dv.reshaped<Eigen::RowMajor>(cfg_.sl, d);
        }
        case Arch::attention: {
            const double sl = static_cast<double>(cfg_.sl);
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden_dim));

            Param& Wo = params_.at("out.W");
            params_.at("out.b").grad.col(0) += dy;
            Wo.grad += dy * c.pooled.transpose();
            const Eigen::VectorXd dpooled = Wo.value.transpose() * dy;

            Eigen::MatrixXd dC =
                (Eigen::VectorXd::Ones(cfg_.sl) * dpooled.transpose()) / sl;
            Eigen::MatrixXd dR = dC * c.V.transpose();
            Eigen::MatrixXd dV = c.R.transpose() * dC;

            Eigen::MatrixXd dS(dR.rows(), dR.cols());
            for (Eigen::Index i = 0; i < dR.rows(); ++i) {
                const double dot = dR.row(i).dot(c.R.row(i));
                dS.row(i) = ((dR.row(i).array() - dot) * c.R.row(i).array()).matrix();
            }

            Eigen::MatrixXd dQ = dS * c.K * inv_sqrt;
            Eigen::MatrixXd dK = dS.transpose() * c.Q * inv_sqrt;

            Param& Wq = params_.at("attn.Wq");
            Param& Wk = params_.at("attn.Wk");
            Param& Wv = params_.at("attn.Wv");
            Wq.grad += dQ.transpose() * c.P;
            Wk.grad += dK.transpose() * c.P;
            Wv.grad += dV.transpose() * c.P;

            Eigen::MatrixXd dP = dQ * Wq.value + dK * Wk.value + dV * Wv.value;

            Param& We = params_.at("embed.W");
            We.grad += dP.transpose() * inputs;
            params_.at("embed.b").grad.col(0) += dP.colwise().sum().transpose();
            if (!want_dinputs) {
                return {};
            }
            return dP * We.value;
        }
    }
    throw config_error("unknown architecture enum value");
}

Eigen::VectorXd Forecaster::forecast(const Window& w) const {
    return forward(w.inputs, nullptr);
}

double Forecaster::loss_and_grad(std::span<const Window* const> batch,
                                 std::vector<Eigen::MatrixXd>* dinputs) {
    if (batch.empty()) {
        throw config_error("loss_and_grad: empty batch");
    }
    if (dinputs) {
        dinputs->assign(batch.size(), Eigen::MatrixXd());
    }
    const double scale = 1.0 / (static_cast<double>(batch.size()) * cfg_.pl);
    double loss = 0.0;
    Cache cache;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Window& w = *batch[i];
        if (w.target.size() != cfg_.pl) {
            throw shape_error("window target has " + std::to_string(w.target.size()) +
                              " steps, model predicts " + std::to_string(cfg_.pl));
        }
        const Eigen::VectorXd y = forward(w.inputs, &cache);
        const Eigen::VectorXd r = y - w.target;
        loss += r.squaredNorm() * scale;
        const Eigen::VectorXd dy = 2.0 * scale * r;
        Eigen::MatrixXd din = backward(w.inputs, cache, dy, dinputs != nullptr);
        if (dinputs) {
            (*dinputs)[i] = std::move(din);
        }
    }
    return loss;
}

namespace {

// Shared batching loop for the two-stage trainer.
std::vector<double> fit_windows(Forecaster& model, std::vector<Window>& windows,
                                const ForecasterConfig& cfg) {
    Adam adam(AdamConfig{.learning_rate = cfg.learning_rate});
    Rng shuffle_rng = Rng(cfg.seed).child(2);
    const std::size_t n = windows.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(cfg.epochs));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(start + bs, n);
            std::vector<const Window*> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&windows[order[i]]);
            }
            model.params().zero_grads();
            const double loss = model.loss_and_grad(std::span<const Window* const>(batch));
            if (!std::isfinite(loss)) {
                throw divergence_error("forecaster training diverged at epoch " +
                                       std::to_string(epoch));
            }
            adam.step(model.params());
            epoch_loss += loss * static_cast<double>(end - start) / static_cast<double>(n);
        }
        if (!std::isfinite(epoch_loss)) {
            throw divergence_error("forecaster training diverged at epoch " +
                                   std::to_string(epoch));
        }
        history.push_back(epoch_loss);
    }
    return history;
}

struct WindowRef {
    int seq = 0;
    int offset = 0;
};

}  // namespace

ForecastTrainResult train_forecaster(const Dataset& ds, const FactorModel* factor,
                                     const ForecasterConfig& cfg) {
    cfg.validate();
    ds.validate();
    if (ds.trajectories.empty()) {
        throw config_error("train_forecaster: dataset is empty");
    }
    if (cfg.use_confounder && factor == nullptr) {
        throw config_error("use_confounder is set but no factor model was provided");
    }
    if (cfg.joint_mode && !cfg.use_confounder) {
        throw config_error("joint_mode requires use_confounder");
    }
    const Eigen::Index T = ds.steps();
    const Eigen::Index k = ds.dims();
    if (cfg.sl + cfg.pl > T) {
        throw config_error("infeasible window: sl + pl = " + std::to_string(cfg.sl + cfg.pl) +
                           " exceeds T = " + std::to_string(T));
    }
    if (factor != nullptr && factor->k() != k) {
        throw shape_error("factor model was built for k = " + std::to_string(factor->k()) +
                          ", dataset has k = " + std::to_string(k));
    }

    const std::size_t n = ds.trajectories.size();
    SplitIndices split = split_by_sequence(n, cfg.seed);
    if (split.train.empty()) {
        throw config_error("training split is empty; dataset has only " + std::to_string(n) +
                           " sequences");
    }

    std::vector<Eigen::MatrixXd> zhat;
    if (cfg.use_confounder) {
        zhat.resize(n);
        for (std::size_t s = 0; s < n; ++s) {
            zhat[s] = factor->infer_confounders(ds.trajectories[s]);
        }
    }

    const Normalizer norm =
        fit_normalizer(ds, split.train, cfg.use_confounder ? &zhat : nullptr);
    const Eigen::Index zd = cfg.use_confounder ? factor->config().z_dim : 0;
    const int d = static_cast<int>(2 * k + zd);

    Forecaster model(cfg, d);
    model.set_normalizer(norm);

    ForecastTrainResult result{std::move(model), {}, std::move(split), std::move(zhat), {}};

    if (!cfg.joint_mode) {
        std::vector<Window> train_windows =
            make_windows_for(ds, cfg.use_confounder ? &result.zhat : nullptr, cfg,
                             result.split.train, cfg.train_stride);
        if (train_windows.empty()) {
            throw config_error("no training windows: increase T or reduce sl/pl");
        }
        norm.apply(train_windows);
        result.loss_history = fit_windows(result.model, train_windows, cfg);
        return result;
    }

    // Joint mode: tune a copy of the factor model together with the
    // forecaster. The stage-one inference output anchors the confounder
    // channel through the drift penalty.
    FactorModel joint_factor = *factor;
    const std::vector<Eigen::MatrixXd> anchor = result.zhat;

    // x/a channels and targets do not change during training; normalize once.
    std::vector<Eigen::MatrixXd> xa_norm(n);
    std::vector<Eigen::VectorXd> y_norm(n);
    for (std::size_t s = 0; s < n; ++s) {
        const Trajectory& traj = ds.trajectories[s];
        Eigen::MatrixXd xa(T, 2 * k);
        xa.leftCols(k) = traj.X;
        xa.rightCols(k) = traj.A;
        xa = (xa.rowwise() - norm.mean.head(2 * k).transpose()).array().rowwise() /
             norm.stdev.head(2 * k).transpose().array();
        xa_norm[s] = std::move(xa);
        y_norm[s] = ((traj.Y.array() - norm.y_mean) / norm.y_std).matrix();
    }

    std::vector<WindowRef> refs;
    for (int s : result.split.train) {
        for (Eigen::Index o = 0; o + cfg.sl + cfg.pl <= T; o += cfg.train_stride) {
            refs.push_back(WindowRef{s, static_cast<int>(o)});
        }
    }
    if (refs.empty()) {
        throw config_error("no training windows: increase T or reduce sl/pl");
    }

    Adam adam_fore(AdamConfig{.learning_rate = cfg.learning_rate});
    Adam adam_fact(AdamConfig{.learning_rate = cfg.learning_rate});
    Rng shuffle_rng = Rng(cfg.seed).child(2);
    std::vector<std::size_t> order(refs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    result.loss_history.reserve(static_cast<std::size_t>(cfg.epochs));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(start + bs, order.size());
            std::vector<WindowRef> batch_refs;
            for (std::size_t i = start; i < end; ++i) {
                batch_refs.push_back(refs[order[i]]);
            }

            std::set<int> uniq;
            for (const WindowRef& r : batch_refs) {
                uniq.insert(r.seq);
            }

            result.model.params().zero_grads();
            joint_factor.params().zero_grads();

            std::map<int, Eigen::MatrixXd> hid, zh, dzh;
            for (int s : uniq) {
                Eigen::MatrixXd hidden;
                zh[s] = joint_factor.infer_with_cache(ds.trajectories[static_cast<std::size_t>(s)],
                                                      hidden);
                hid[s] = std::move(hidden);
                dzh[s] = Eigen::MatrixXd::Zero(T, zd);
            }

            std::vector<Window> batch(batch_refs.size());
            for (std::size_t i = 0; i < batch_refs.size(); ++i) {
                const WindowRef& r = batch_refs[i];
                Window& w = batch[i];
                w.seq_index = r.seq;
                w.offset = r.offset;
                w.inputs.resize(cfg.sl, d);
                w.inputs.leftCols(2 * k) =
                    xa_norm[static_cast<std::size_t>(r.seq)].middleRows(r.offset, cfg.sl);
                w.inputs.rightCols(zd) =
                    (zh[r.seq].middleRows(r.offset, cfg.sl).rowwise() -
                     norm.mean.tail(zd).transpose())
                        .array()
                        .rowwise() /
                    norm.stdev.tail(zd).transpose().array();
                w.target = y_norm[static_cast<std::size_t>(r.seq)].segment(r.offset + cfg.sl,
                                                                           cfg.pl);
            }
            std::vector<const Window*> batch_ptrs(batch.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                batch_ptrs[i] = &batch[i];
            }
            std::vector<Eigen::MatrixXd> dinputs;
            double loss =
                result.model.loss_and_grad(std::span<const Window* const>(batch_ptrs), &dinputs);

            // Scatter input gradients back onto the confounder series; the
            // z channel was z-scored, so divide by its scale.
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const WindowRef& r = batch_refs[i];
                for (int row = 0; row < cfg.sl; ++row) {
                    for (Eigen::Index c = 0; c < zd; ++c) {
                        dzh[r.seq](r.offset + row, c) +=
                            dinputs[i](row, 2 * k + c) / norm.stdev(2 * k + c);
                    }
                }
            }

            // Confounder drift penalty over the batch's sequences.
            const double n_pen =
                static_cast<double>(uniq.size()) * static_cast<double>(T) *
                static_cast<double>(zd);
            for (int s : uniq) {
                const Eigen::MatrixXd diff = zh[s] - anchor[static_cast<std::size_t>(s)];
                loss += cfg.reg_lambda * diff.squaredNorm() / n_pen;
                dzh[s] += (2.0 * cfg.reg_lambda / n_pen) * diff;
            }

            for (int s : uniq) {
                joint_factor.backprop_confounders(ds.trajectories[static_cast<std::size_t>(s)],
                                                  hid[s], dzh[s]);
            }

            if (!std::isfinite(loss)) {
                throw divergence_error("joint training diverged at epoch " +
                                       std::to_string(epoch));
            }
            adam_fore.step(result.model.params());
            adam_fact.step(joint_factor.params());
            epoch_loss += loss * static_cast<double>(end - start) /
                          static_cast<double>(order.size());
        }
        result.loss_history.push_back(epoch_loss);
    }

    // Re-infer with the tuned factor model so callers see consistent series.
    for (std::size_t s = 0; s < n; ++s) {
        result.zhat[s] = joint_factor.infer_confounders(ds.trajectories[s]);
    }
    result.joint_factor = std::move(joint_factor);
    return result;
}

void save_forecaster(const Forecaster& model, const std::string& path) {
    Checkpoint ck;
    ck.kind = "forecaster";
    const ForecasterConfig& c = model.config();
    ck.config["arch"] = arch_name(c.arch);
    ck.config["sl"] = std::to_string(c.sl);
    ck.config["pl"] = std::to_string(c.pl);
    ck.config["use_confounder"] = c.use_confounder ? "true" : "false";
    ck.config["hidden_dim"] = std::to_string(c.hidden_dim);
    ck.config["learning_rate"] = format_double(c.learning_rate);
    ck.config["epochs"] = std::to_string(c.epochs);
    ck.config["batch_size"] = std::to_string(c.batch_size);
    ck.config["joint_mode"] = c.joint_mode ? "true" : "false";
    ck.config["reg_lambda"] = format_double(c.reg_lambda);
    ck.config["seed"] = std::to_string(c.seed);
    ck.config["train_stride"] = std::to_string(c.train_stride);
    ck.config["input_dim"] = std::to_string(model.input_dim());
    ck.config["y_mean"] = format_double(model.normalizer().y_mean);
    ck.config["y_std"] = format_double(model.normalizer().y_std);
    for (const auto& [name, p] : model.params()) {
        ck.params[name] = p.value;
    }
    ck.params["norm.mean"] = model.normalizer().mean;
    ck.params["norm.stdev"] = model.normalizer().stdev;
    write_checkpoint(ck, path);
}

Forecaster load_forecaster(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.kind != "forecaster") {
        throw checkpoint_error(path + ": checkpoint kind is '" + ck.kind +
                               "', expected 'forecaster'");
    }
    auto get = [&](const char* key) -> std::string {
        auto it = ck.config.find(key);
        if (it == ck.config.end()) {
            throw checkpoint_error(path + ": missing config key '" + std::string(key) + "'");
        }
        return it->second;
    };
    auto get_bool = [&](const char* key) {
        const std::string v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw checkpoint_error(path + ": config key '" + std::string(key) +
                               "' is not a boolean");
    };

    ForecasterConfig cfg;
    cfg.arch = arch_from_name(get("arch"));
    cfg.sl = static_cast<int>(parse_int(get("sl"), path));
    cfg.pl = static_cast<int>(parse_int(get("pl"), path));
    cfg.use_confounder = get_bool("use_confounder");
    cfg.hidden_dim = static_cast<int>(parse_int(get("hidden_dim"), path));
    cfg.learning_rate = parse_double(get("learning_rate"), path);
    cfg.epochs = static_cast<int>(parse_int(get("epochs"), path));
    cfg.batch_size = static_cast<int>(parse_int(get("batch_size"), path));
    cfg.joint_mode = get_bool("joint_mode");
    cfg.reg_lambda = parse_double(get("reg_lambda"), path);
    cfg.seed = parse_u64(get("seed"), path);
    cfg.train_stride = static_cast<int>(parse_int(get("train_stride"), path));
    const int input_dim = static_cast<int>(parse_int(get("input_dim"), path));

    Forecaster model(cfg, input_dim);

    Normalizer norm;
    auto norm_mean = ck.params.find("norm.mean");
    auto norm_std = ck.params.find("norm.stdev");
    if (norm_mean == ck.params.end() || norm_std == ck.params.end()) {
        throw checkpoint_error(path + ": missing normalization constants");
    }
    norm.mean = norm_mean->second.col(0);
    norm.stdev = norm_std->second.col(0);
    norm.y_mean = parse_double(get("y_mean"), path);
    norm.y_std = parse_double(get("y_std"), path);
    if (norm.mean.size() != input_dim || norm.stdev.size() != input_dim) {
        throw checkpoint_error(path + ": normalization constants have the wrong length");
    }
    model.set_normalizer(norm);

    std::size_t matched = 0;
    for (auto& [name, p] : model.params()) {
        auto it = ck.params.find(name);
        if (it == ck.params.end()) {
            throw checkpoint_error(path + ": architecture mismatch, missing parameter '" + name +
                                   "' for arch '" + arch_name(cfg.arch) + "'");
        }
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
            throw checkpoint_error(path + ": architecture mismatch, parameter '" + name +
                                   "' has the wrong shape");
        }
        p.value = it->second;
        ++matched;
    }
    if (matched + 2 != ck.params.size()) {
        throw checkpoint_error(path + ": architecture mismatch, checkpoint carries " +
                               std::to_string(ck.params.size() - 2) +
                               " model parameters, arch '" + arch_name(cfg.arch) + "' expects " +
                               std::to_string(matched));
    }
    return model;
}

}  // namespace deconf
