#include "deconf/factor_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "deconf/checkpoint.hpp"
#include "deconf/textio.hpp"

namespace deconf {

namespace {

std::string head_w(int j) { return "head_" + std::to_string(j) + ".w"; }
std::string head_b(int j) { return "head_" + std::to_string(j) + ".b"; }

}  // namespace

void FactorModelConfig::validate() const {
    if (hidden_dim < 1) {
        throw config_error("hidden_dim must be >= 1, got " + std::to_string(hidden_dim));
    }
    if (z_dim < 1) {
        throw config_error("z_dim must be >= 1, got " + std::to_string(z_dim));
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
    if (!(init_scale > 0.0)) {
        throw config_error("init_scale must be > 0, got " + std::to_string(init_scale));
    }
}

FactorModel::FactorModel(int k, const FactorModelConfig& cfg) : k_(k), cfg_(cfg) {
    cfg.validate();
    if (k < 1) {
        throw config_error("factor model needs k >= 1, got " + std::to_string(k));
    }
    const int H = cfg.hidden_dim;
    const int Zd = cfg.z_dim;
    params_.add("rnn.W_in", H, 2 * k);
    params_.add("rnn.W_h", H, H);
    params_.add("rnn.b", H);
    params_.add("proj.W", Zd, H);
    params_.add("proj.b", Zd);
    for (int j = 0; j < k; ++j) {
        params_.add(head_w(j), Zd + k);
        params_.add(head_b(j), 1);
    }

    Rng rng(cfg.seed);
    const double s = cfg.init_scale;
    auto fill = [&](const std::string& name) {
        Eigen::MatrixXd& m = params_.at(name).value;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                m(r, c) = rng.uniform(-s, s);
            }
        }
    };
    fill("rnn.W_in");
    fill("rnn.W_h");
    fill("proj.W");
    for (int j = 0; j < k; ++j) {
        fill(head_w(j));
    }
}

Eigen::MatrixXd FactorModel::infer_with_cache(const Trajectory& traj,
                                              Eigen::MatrixXd& hidden_out) const {
    if (traj.dims() != k_) {
        std::ostringstream os;
        os << "trajectory has k = " << traj.dims() << " but the model was built for k = " << k_;
        throw shape_error(os.str());
    }
    const Eigen::Index T = traj.steps();
    const int H = cfg_.hidden_dim;
    const int Zd = cfg_.z_dim;
    const Eigen::MatrixXd& W_in = params_.at("rnn.W_in").value;
    const Eigen::MatrixXd& W_h = params_.at("rnn.W_h").value;
    const Eigen::VectorXd b = params_.at("rnn.b").value.col(0);
    const Eigen::MatrixXd& W_z = params_.at("proj.W").value;
    const Eigen::VectorXd b_z = params_.at("proj.b").value.col(0);

    hidden_out.resize(T, H);
    Eigen::MatrixXd zhat(T, Zd);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd u(2 * k_);
    for (Eigen::Index t = 0; t < T; ++t) {
        u.head(k_) = traj.X.row(t).transpose();
        u.tail(k_) = traj.A.row(t).transpose();
        h = ((W_in * u + W_h * h + b).array().tanh()).matrix();
        hidden_out.row(t) = h.transpose();
        zhat.row(t) = (W_z * h + b_z).transpose();
    }
    return zhat;
}

Eigen::MatrixXd FactorModel::infer_confounders(const Trajectory& traj) const {
    Eigen::MatrixXd hidden;
    return infer_with_cache(traj, hidden);
}

Eigen::MatrixXd FactorModel::predict_treatments(const Eigen::MatrixXd& zhat,
                                                const Eigen::MatrixXd& X) const {
    if (X.cols() != k_) {
        std::ostringstream os;
        os << "X has k = " << X.cols() << " but the model was built for k = " << k_;
        throw shape_error(os.str());
    }
    if (zhat.cols() != cfg_.z_dim || zhat.rows() != X.rows()) {
        std::ostringstream os;
        os << "zhat is " << zhat.rows() << "x" << zhat.cols() << ", expected " << X.rows() << "x"
           << cfg_.z_dim;
        throw shape_error(os.str());
    }
    const Eigen::Index T = X.rows();
    const int Zd = cfg_.z_dim;
    Eigen::MatrixXd ahat(T, k_);
    Eigen::VectorXd in(Zd + k_);
    for (Eigen::Index t = 0; t < T; ++t) {
        in.head(Zd) = zhat.row(t).transpose();
        in.tail(k_) = X.row(t).transpose();
        for (int j = 0; j < k_; ++j) {
            ahat(t, j) = params_.at(head_w(j)).value.col(0).dot(in) +
                         params_.at(head_b(j)).value(0, 0);
        }
    }
    return ahat;
}

void FactorModel::backprop_confounders(const Trajectory& traj, const Eigen::MatrixXd& hidden,
                                       const Eigen::MatrixXd& dzhat) {
    const Eigen::Index T = traj.steps();
    const int H = cfg_.hidden_dim;
    if (hidden.rows() != T || hidden.cols() != H || dzhat.rows() != T ||
        dzhat.cols() != cfg_.z_dim) {
        throw shape_error("backprop_confounders: cache shapes do not match the trajectory");
    }
    const Eigen::MatrixXd& W_h = params_.at("rnn.W_h").value;
    const Eigen::MatrixXd& W_z = params_.at("proj.W").value;
    Param& g_Win = params_.at("rnn.W_in");
    Param& g_Wh = params_.at("rnn.W_h");
    Param& g_b = params_.at("rnn.b");
    Param& g_Wz = params_.at("proj.W");
    Param& g_bz = params_.at("proj.b");

    Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd u(2 * k_);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
        const Eigen::VectorXd h_t = hidden.row(t).transpose();
        const Eigen::VectorXd dz = dzhat.row(t).transpose();
        g_Wz.grad += dz * h_t.transpose();
        g_bz.grad.col(0) += dz;
        Eigen::VectorXd dh = W_z.transpose() * dz + dh_next;
        Eigen::VectorXd da = (dh.array() * (1.0 - h_t.array().square())).matrix();
        g_b.grad.col(0) += da;
        u.head(k_) = traj.X.row(t).transpose();
        u.tail(k_) = traj.A.row(t).transpose();
        g_Win.grad += da * u.transpose();
        if (t > 0) {
            g_Wh.grad += da * hidden.row(t - 1);
        }
        dh_next = W_h.transpose() * da;
    }
}

double FactorModel::loss_and_grad(std::span<const Trajectory* const> batch) {
    if (batch.empty()) {
        throw config_error("loss_and_grad: empty batch");
    }
    std::size_t n_terms = 0;
    for (const Trajectory* traj : batch) {
        n_terms += static_cast<std::size_t>(traj->steps()) * static_cast<std::size_t>(k_);
    }
    const double inv_n = 1.0 / static_cast<double>(n_terms);
    const int Zd = cfg_.z_dim;

    double loss = 0.0;
    Eigen::MatrixXd hidden;
    for (const Trajectory* traj : batch) {
        const Eigen::Index T = traj->steps();
        const Eigen::MatrixXd zhat = infer_with_cache(*traj, hidden);
        Eigen::MatrixXd dzhat = Eigen::MatrixXd::Zero(T, Zd);
        Eigen::VectorXd in(Zd + k_);
        for (Eigen::Index t = 0; t < T; ++t) {
            in.head(Zd) = zhat.row(t).transpose();
            in.tail(k_) = traj->X.row(t).transpose();
            for (int j = 0; j < k_; ++j) {
                Param& w = params_.at(head_w(j));
                Param& bj = params_.at(head_b(j));
                const double ahat = w.value.col(0).dot(in) + bj.value(0, 0);
                const double r = ahat - traj->A(t, j);
                loss += r * r * inv_n;
                const double e = 2.0 * r * inv_n;
                w.grad.col(0) += e * in;
                bj.grad(0, 0) += e;
                dzhat.row(t) += e * w.value.col(0).head(Zd).transpose();
            }
        }
        backprop_confounders(*traj, hidden, dzhat);
    }
    return loss;
}

double FactorModel::loss_and_grad(const std::vector<Trajectory>& trajectories) {
    std::vector<const Trajectory*> ptrs;
    ptrs.reserve(trajectories.size());
    for (const auto& t : trajectories) {
        ptrs.push_back(&t);
    }
    return loss_and_grad(std::span<const Trajectory* const>(ptrs));
}

FactorTrainResult train_factor_model(const Dataset& ds, const FactorModelConfig& cfg,
                                     const FactorEpochCallback& on_epoch) {
    cfg.validate();
    ds.validate();
    if (ds.trajectories.empty()) {
        throw config_error("train_factor_model: dataset is empty");
    }

    FactorModel model(static_cast<int>(ds.dims()), cfg);
    Adam adam(AdamConfig{.learning_rate = cfg.learning_rate});
    Rng shuffle_rng = Rng(cfg.seed).child(1);

    const std::size_t n = ds.trajectories.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(cfg.epochs));
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t end = std::min(start + bs, n);
            std::vector<const Trajectory*> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&ds.trajectories[order[i]]);
            }
            model.params().zero_grads();
            const double loss = model.loss_and_grad(std::span<const Trajectory* const>(batch));
            if (!std::isfinite(loss)) {
                throw divergence_error("factor model training diverged at epoch " +
                                       std::to_string(epoch) + " (learning rate " +
                                       format_double(cfg.learning_rate) + ")");
            }
            adam.step(model.params());
            epoch_loss += loss * static_cast<double>(end - start) / static_cast<double>(n);
        }
        history.push_back(epoch_loss);
        if (on_epoch) {
            on_epoch(epoch, epoch_loss, model);
        }
    }
    return FactorTrainResult{std::move(model), std::move(history)};
}

Eigen::MatrixXd residual_cross_correlation(const FactorModel& model, const Dataset& ds,
                                           bool zero_confounder) {
    ds.validate();
    const Eigen::Index k = ds.dims();
    const Eigen::Index T = ds.steps();
    const Eigen::Index n_rows = static_cast<Eigen::Index>(ds.trajectories.size()) * T;
    if (n_rows < 3) {
        throw insufficient_data_error("residual_cross_correlation needs at least 3 pooled "
                                      "samples, got " + std::to_string(n_rows));
    }

    Eigen::MatrixXd residuals(n_rows, k);
    Eigen::Index row = 0;
    for (const Trajectory& traj : ds.trajectories) {
        Eigen::MatrixXd zhat;
        if (zero_confounder) {
            zhat = Eigen::MatrixXd::Zero(traj.steps(), model.config().z_dim);
        } else {
            zhat = model.infer_confounders(traj);
        }
        residuals.middleRows(row, traj.steps()) = traj.A - model.predict_treatments(zhat, traj.X);
        row += traj.steps();
    }

    const Eigen::RowVectorXd mean = residuals.colwise().mean();
    residuals.rowwise() -= mean;
    Eigen::VectorXd sd(k);
    for (Eigen::Index j = 0; j < k; ++j) {
        sd(j) = std::sqrt(residuals.col(j).squaredNorm() / static_cast<double>(n_rows));
    }

    Eigen::MatrixXd corr(k, k);
    for (Eigen::Index i = 0; i < k; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            if (sd(i) == 0.0 || sd(j) == 0.0) {
                corr(i, j) = 0.0;
            } else if (i == j) {
                corr(i, j) = 1.0;
            } else {
                corr(i, j) = residuals.col(i).dot(residuals.col(j)) /
                             (static_cast<double>(n_rows) * sd(i) * sd(j));
            }
        }
    }
    return corr;
}

void save_factor_model(const FactorModel& model, const std::string& path) {
    Checkpoint ck;
    ck.kind = "factor";
    const FactorModelConfig& c = model.config();
    ck.config["k"] = std::to_string(model.k());
    ck.config["hidden_dim"] = std::to_string(c.hidden_dim);
    ck.config["z_dim"] = std::to_string(c.z_dim);
    ck.config["learning_rate"] = format_double(c.learning_rate);
    ck.config["epochs"] = std::to_string(c.epochs);
    ck.config["batch_size"] = std::to_string(c.batch_size);
    ck.config["seed"] = std::to_string(c.seed);
    ck.config["init_scale"] = format_double(c.init_scale);
    for (const auto& [name, p] : model.params()) {
        ck.params[name] = p.value;
    }
    write_checkpoint(ck, path);
}

FactorModel load_factor_model(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.kind != "factor") {
        throw checkpoint_error(path + ": checkpoint kind is '" + ck.kind +
                               "', expected 'factor'");
    }
    auto get = [&](const char* key) -> std::string {
        auto it = ck.config.find(key);
        if (it == ck.config.end()) {
            throw checkpoint_error(path + ": missing config key '" + std::string(key) + "'");
        }
        return it->second;
    };
    FactorModelConfig cfg;
    const int k = static_cast<int>(parse_int(get("k"), path));
    cfg.hidden_dim = static_cast<int>(parse_int(get("hidden_dim"), path));
    cfg.z_dim = static_cast<int>(parse_int(get("z_dim"), path));
    cfg.learning_rate = parse_double(get("learning_rate"), path);
    cfg.epochs = static_cast<int>(parse_int(get("epochs"), path));
    cfg.batch_size = static_cast<int>(parse_int(get("batch_size"), path));
    cfg.seed = parse_u64(get("seed"), path);
    cfg.init_scale = parse_double(get("init_scale"), path);

    FactorModel model(k, cfg);
    std::size_t matched = 0;
    for (auto& [name, p] : model.params()) {
        auto it = ck.params.find(name);
        if (it == ck.params.end()) {
            throw checkpoint_error(path + ": architecture mismatch, missing parameter '" + name +
                                   "'");
        }
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
            throw checkpoint_error(path + ": architecture mismatch, parameter '" + name +
                                   "' has the wrong shape");
        }
        p.value = it->second;
        ++matched;
    }
    if (matched != ck.params.size()) {
        throw checkpoint_error(path + ": architecture mismatch, checkpoint carries " +
                               std::to_string(ck.params.size()) + " parameters, model expects " +
                               std::to_string(matched));
    }
    return model;
}

}  // namespace deconf
