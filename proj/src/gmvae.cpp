#include "osr/gmvae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "osr/serialize.hpp"

namespace osr::gmvae {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
}

void GmvaeConfig::validate() const {
    require(n_classes >= 2, "GmvaeConfig: need at least 2 known classes");
    require(static_cast<int>(components_per_class.size()) == n_classes,
            "GmvaeConfig: components_per_class must list every class");
    for (int k : components_per_class) require(k >= 1, "GmvaeConfig: each K_c must be >= 1");
    require(dim_z >= 1 && dim_w >= 1, "GmvaeConfig: latent dimensions must be >= 1");
    if (!component_prior.empty()) {
        require(static_cast<int>(component_prior.size()) == n_classes,
                "GmvaeConfig: component_prior must have one row per class");
        for (int c = 0; c < n_classes; ++c) {
            const auto& row = component_prior[c];
            require(static_cast<int>(row.size()) == components_per_class[c],
                    "GmvaeConfig: prior row width must equal K_c");
            double sum = 0.0;
            for (double p : row) {
                require(p >= 0.0, "GmvaeConfig: negative prior probability");
                sum += p;
            }
            require(std::fabs(sum - 1.0) < 1e-9, "GmvaeConfig: prior row must sum to 1");
        }
    }
    require(!blocks.empty(), "GmvaeConfig: no feature blocks");
    int offset = 0;
    for (const auto& b : blocks) {
        require(b.start == offset && b.width >= 1, "GmvaeConfig: blocks must tile the feature row");
        offset += b.width;
    }
}

int GmvaeConfig::total_components() const {
    return std::accumulate(components_per_class.begin(), components_per_class.end(), 0);
}

int GmvaeConfig::input_width() const {
    int w = 0;
    for (const auto& b : blocks) w += b.width;
    return w;
}

Vec GmvaeConfig::prior_for_class(int c) const {
    if (!component_prior.empty()) return component_prior[c];
    const int k = components_per_class[c];
    return Vec(k, 1.0 / k);
}

GmvaeModel GmvaeModel::init(const GmvaeConfig& config, RngStream& rng) {
    config.validate();
    GmvaeModel m;
    m.config = config;
    const int d_in = config.input_width();

    std::vector<int> zp{d_in};
    zp.insert(zp.end(), config.phi_z_hidden.begin(), config.phi_z_hidden.end());
    zp.push_back(2 * config.dim_z);
    m.spec_phi_z = nn::MlpSpec::stack(zp, nn::Activation::sigmoid);

    m.spec_phi_w = nn::MlpSpec::stack({d_in + config.n_classes, 2 * config.dim_w},
                                      nn::Activation::sigmoid);

    std::vector<int> bp{config.dim_w};
    bp.insert(bp.end(), config.beta_hidden.begin(), config.beta_hidden.end());
    bp.push_back(2 * config.total_components() * config.dim_z);
    m.spec_beta = nn::MlpSpec::stack(bp, nn::Activation::sigmoid);

    // theta mirrors phi_z
    std::vector<int> tp{config.dim_z};
    tp.insert(tp.end(), config.phi_z_hidden.rbegin(), config.phi_z_hidden.rend());
    tp.push_back(d_in);
    m.spec_theta = nn::MlpSpec::stack(tp, nn::Activation::sigmoid);

    m.phi_z = nn::MlpParams::init(m.spec_phi_z, rng);
    m.phi_w = nn::MlpParams::init(m.spec_phi_w, rng);
    m.beta = nn::MlpParams::init(m.spec_beta, rng);
    m.theta = nn::MlpParams::init(m.spec_theta, rng);
    return m;
}

GaussianBatch split_gaussian_head(const Matrix& head_output) {
    require(head_output.cols % 2 == 0, "split_gaussian_head: head width must be even");
    const int dim = head_output.cols / 2;
    GaussianBatch g{Matrix(head_output.rows, dim), Matrix(head_output.rows, dim)};
    for (int i = 0; i < head_output.rows; ++i)
        for (int j = 0; j < dim; ++j) {
            g.mean(i, j) = head_output(i, j);
            g.log_variance(i, j) =
                clamp(head_output(i, dim + j), nn::kLogVarClampLo, nn::kLogVarClampHi);
        }
    return g;
}

GaussianBatch encode_z(const GmvaeModel& model, const Matrix& x) {
    return split_gaussian_head(nn::forward_infer(model.spec_phi_z, model.phi_z, x));
}

Matrix one_hot(const std::vector<int>& class_indices, int n_classes) {
    Matrix y(static_cast<int>(class_indices.size()), n_classes);
    for (std::size_t i = 0; i < class_indices.size(); ++i) {
        require(class_indices[i] >= 0 && class_indices[i] < n_classes,
                "one_hot: class index out of range");
        y(static_cast<int>(i), class_indices[i]) = 1.0;
    }
    return y;
}

namespace {

Matrix concat_columns(const Matrix& a, const Matrix& b) {
    require(a.rows == b.rows, "concat_columns: row mismatch");
    Matrix c(a.rows, a.cols + b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) c(i, j) = a(i, j);
        for (int j = 0; j < b.cols; ++j) c(i, a.cols + j) = b(i, j);
    }
    return c;
}

void check_one_hot(const Matrix& y, int n_classes) {
    require(y.cols == n_classes, "encode_w: one-hot width must equal C");
    for (int i = 0; i < y.rows; ++i) {
        int ones = 0;
        for (int j = 0; j < y.cols; ++j) {
            const double v = y(i, j);
            require(v == 0.0 || v == 1.0, "encode_w: y rows must be one-hot");
            if (v == 1.0) ++ones;
        }
        require(ones == 1, "encode_w: y rows must have exactly one 1");
    }
}

}  // namespace

GaussianBatch encode_w(const GmvaeModel& model, const Matrix& x, const Matrix& y_one_hot) {
    check_one_hot(y_one_hot, model.config.n_classes);
    const Matrix xy = concat_columns(x, y_one_hot);
    return split_gaussian_head(nn::forward_infer(model.spec_phi_w, model.phi_w, xy));
}

ComponentGrid prior_components(const GmvaeModel& model, const Vec& w) {
    require(static_cast<int>(w.size()) == model.config.dim_w,
            "prior_components: w dimension mismatch");
    Matrix win(1, model.config.dim_w);
    for (std::size_t j = 0; j < w.size(); ++j) win(0, j) = w[j];
    const Matrix out = nn::forward_infer(model.spec_beta, model.beta, win);
    const GaussianBatch flat = split_gaussian_head(out);  // 1 x (totalK * dim_z)

    ComponentGrid grid;
    grid.by_class.resize(model.config.n_classes);
    const int dz = model.config.dim_z;
    int comp = 0;
    for (int c = 0; c < model.config.n_classes; ++c) {
        for (int k = 0; k < model.config.components_per_class[c]; ++k, ++comp) {
            nn::GaussianParams g;
            g.mean.assign(flat.mean.row(0).begin() + comp * dz,
                          flat.mean.row(0).begin() + (comp + 1) * dz);
            g.log_variance.assign(flat.log_variance.row(0).begin() + comp * dz,
                                  flat.log_variance.row(0).begin() + (comp + 1) * dz);
            grid.by_class[c].push_back(std::move(g));
        }
    }
    return grid;
}

ComponentPosterior component_posterior(const GmvaeModel& model, const Vec& z, const Vec& w,
                                       int class_index) {
    require(class_index >= 0 && class_index < model.config.n_classes,
            "component_posterior: class index out of range");
    require(static_cast<int>(z.size()) == model.config.dim_z,
            "component_posterior: z dimension mismatch");
    const ComponentGrid grid = prior_components(model, w);
    const auto& comps = grid.by_class[class_index];
    const Vec prior = model.config.prior_for_class(class_index);

    Vec scores(comps.size());
    for (std::size_t k = 0; k < comps.size(); ++k)
        scores[k] = std::log(prior[k]) + nn::gaussian_log_density(z, comps[k].mean, comps[k].log_variance);
    const double lse = log_sum_exp(scores);

    ComponentPosterior post;
    if (!std::isfinite(lse)) {
        post.probs = prior;
        post.underflow = true;
        return post;
    }
    post.probs.resize(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) post.probs[k] = std::exp(scores[k] - lse);
    return post;
}

namespace {

struct HeadSplit {
    Matrix mean, logvar;
    Matrix clamp_mask;  // 1 where the raw log-variance was inside the clamp window
};

HeadSplit split_with_mask(const Matrix& head) {
    const int dim = head.cols / 2;
    HeadSplit s{Matrix(head.rows, dim), Matrix(head.rows, dim), Matrix(head.rows, dim)};
    for (int i = 0; i < head.rows; ++i)
        for (int j = 0; j < dim; ++j) {
            s.mean(i, j) = head(i, j);
            const double raw = head(i, dim + j);
            s.logvar(i, j) = clamp(raw, nn::kLogVarClampLo, nn::kLogVarClampHi);
            s.clamp_mask(i, j) = (raw > nn::kLogVarClampLo && raw < nn::kLogVarClampHi) ? 1.0 : 0.0;
        }
    return s;
}

void scale_grads(nn::MlpGrads& g, double s) {
    g.for_each_trainable([&](const std::string&, Vec& v) {
        for (double& x : v) x *= s;
    });
}

}  // namespace

ElboBreakdown elbo_fixed_noise(const GmvaeModel& model, const Matrix& x,
                               const std::vector<int>& class_indices, const Matrix& eps_z,
                               const Matrix& eps_w, const ElboTermWeights& weights,
                               GmvaeGrads* grads) {
    const auto& cfg = model.config;
    const int n = x.rows;
    const int dz = cfg.dim_z;
    const int dw = cfg.dim_w;
    require(n >= 1, "elbo: empty batch");
    require(static_cast<int>(class_indices.size()) == n, "elbo: label count mismatch");
    require(eps_z.rows == n && eps_z.cols == dz, "elbo: eps_z shape mismatch");
    require(eps_w.rows == n && eps_w.cols == dw, "elbo: eps_w shape mismatch");
    for (int c : class_indices)
        require(c >= 0 && c < cfg.n_classes, "elbo: class index out of range");

    // ---- forward pass ----
    nn::ForwardTrace tr_phi_w, tr_beta, tr_theta;
    const Matrix az = nn::forward_infer(model.spec_phi_z, model.phi_z, x);  // frozen path
    const HeadSplit qz = split_with_mask(az);

    Matrix z(n, dz);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dz; ++j)
            z(i, j) = qz.mean(i, j) + std::exp(0.5 * qz.logvar(i, j)) * eps_z(i, j);

    const Matrix y = one_hot(class_indices, cfg.n_classes);
    const Matrix xy = concat_columns(x, y);
    const Matrix aw = nn::forward(model.spec_phi_w, model.phi_w, xy, nn::Mode::train, nullptr,
                                  grads ? &tr_phi_w : nullptr);
    const HeadSplit qw = split_with_mask(aw);

    Matrix w(n, dw);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dw; ++j)
            w(i, j) = qw.mean(i, j) + std::exp(0.5 * qw.logvar(i, j)) * eps_w(i, j);

    // poisoned parameters surface here as non-finite samples; report them as
    // a numeric failure so training can abort onto its checkpoint
    if (!all_finite(z.data)) throw NumericError("elbo: non-finite z sample");
    if (!all_finite(w.data)) throw NumericError("elbo: non-finite w sample");

    const Matrix bout = nn::forward(model.spec_beta, model.beta, w, nn::Mode::train, nullptr,
                                    grads ? &tr_beta : nullptr);
    const HeadSplit prior = split_with_mask(bout);  // [n x totalK*dz] halves

    const Matrix xhat = nn::forward(model.spec_theta, model.theta, z, nn::Mode::train, nullptr,
                                    grads ? &tr_theta : nullptr);

    // component offsets per class into the flattened (c,k) axis
    std::vector<int> comp_offset(cfg.n_classes, 0);
    for (int c = 1; c < cfg.n_classes; ++c)
        comp_offset[c] = comp_offset[c - 1] + cfg.components_per_class[c - 1];

    const double scale = 1.0 / n;
    double sum_recon = 0.0, sum_cover = 0.0, sum_wp = 0.0, sum_vp = 0.0;

    Matrix d_xhat(n, xhat.cols);
    Matrix d_bout(n, bout.cols);
    Matrix d_aw(n, aw.cols);

    for (int i = 0; i < n; ++i) {
        const int c = class_indices[i];
        const int kc = cfg.components_per_class[c];
        const Vec pi = cfg.prior_for_class(c);

        // reconstruction log-likelihood
        double recon = 0.0;
        for (const auto& block : cfg.blocks) {
            for (int d = block.start; d < block.start + block.width; ++d) {
                const double xv = x(i, d);
                const double hv = xhat(i, d);
                if (block.likelihood == Likelihood::gaussian) {
                    const double diff = xv - hv;
                    recon += -0.5 * kLog2Pi - 0.5 * diff * diff;
                    if (grads) d_xhat(i, d) = weights.reconstruction * scale * diff;
                } else {
                    const double s = nn::sigmoid(hv);
                    // cross-entropy written against the logit for stability
                    const double log_s = hv >= 0.0 ? -std::log1p(std::exp(-hv)) : hv - std::log1p(std::exp(hv));
                    const double log_1ms = hv >= 0.0 ? -hv - std::log1p(std::exp(-hv)) : -std::log1p(std::exp(hv));
                    recon += xv * log_s + (1.0 - xv) * log_1ms;
                    if (grads) d_xhat(i, d) = weights.reconstruction * scale * (xv - s);
                }
            }
        }

        // q_z log-density at the sample
        double log_qz = 0.0;
        for (int j = 0; j < dz; ++j)
            log_qz += -0.5 * kLog2Pi - 0.5 * qz.logvar(i, j) - 0.5 * eps_z(i, j) * eps_z(i, j);

        // component log-densities and responsibilities for the labeled class
        Vec ln(kc), t(kc);
        for (int k = 0; k < kc; ++k) {
            const int comp = comp_offset[c] + k;
            double ld = 0.0;
            for (int j = 0; j < dz; ++j) {
                const int col = comp * dz + j;
                const double var = std::exp(prior.logvar(i, col));
                const double diff = z(i, j) - prior.mean(i, col);
                ld += -0.5 * kLog2Pi - 0.5 * prior.logvar(i, col) - 0.5 * diff * diff / var;
            }
            ln[k] = ld;
            t[k] = std::log(pi[k]) + ld;
        }
        const double lse = log_sum_exp(t);
        if (!std::isfinite(lse)) throw NumericError("elbo: component scores underflowed");
        Vec r(kc), log_r(kc);
        for (int k = 0; k < kc; ++k) {
            log_r[k] = t[k] - lse;
            r[k] = std::exp(log_r[k]);
        }

        double cover = log_qz;
        for (int k = 0; k < kc; ++k) cover -= r[k] * ln[k];

        double wp = 0.0;
        for (int j = 0; j < dw; ++j)
            wp += 0.5 * (qw.mean(i, j) * qw.mean(i, j) + std::exp(qw.logvar(i, j)) - 1.0 -
                         qw.logvar(i, j));

        double vp = 0.0;
        for (int k = 0; k < kc; ++k)
            if (r[k] > 0.0) vp += r[k] * (log_r[k] - std::log(pi[k]));

        sum_recon += recon;
        sum_cover += cover;
        sum_wp += wp;
        sum_vp += vp;

        if (grads) {
            // beta head gradient: u_k = wc*r_k + r_k*(q_k - qbar) with
            // q_k = wc*ln_k - wvp*(log r_k - log pi_k + 1)
            Vec q(kc), u(kc);
            double qbar = 0.0;
            for (int k = 0; k < kc; ++k) {
                q[k] = weights.latent_covering * ln[k] -
                       weights.v_prior * (log_r[k] - std::log(pi[k]) + 1.0);
                qbar += r[k] * q[k];
            }
            for (int k = 0; k < kc; ++k) u[k] = weights.latent_covering * r[k] + r[k] * (q[k] - qbar);

            const int half = bout.cols / 2;
            for (int k = 0; k < kc; ++k) {
                if (u[k] == 0.0) continue;
                const int comp = comp_offset[c] + k;
                for (int j = 0; j < dz; ++j) {
                    const int col = comp * dz + j;
                    const double var = std::exp(prior.logvar(i, col));
                    const double diff = z(i, j) - prior.mean(i, col);
                    d_bout(i, col) += scale * u[k] * diff / var;
                    d_bout(i, half + col) += scale * u[k] * (-0.5 + 0.5 * diff * diff / var) *
                                             prior.clamp_mask(i, col);
                }
            }
        }
    }

    const ElboBreakdown breakdown = ElboBreakdown::assemble(
        sum_recon * scale, sum_cover * scale, sum_wp * scale, sum_vp * scale);
    if (!std::isfinite(breakdown.reconstruction)) throw NumericError("elbo: non-finite reconstruction term");
    if (!std::isfinite(breakdown.latent_covering)) throw NumericError("elbo: non-finite latent covering term");
    if (!std::isfinite(breakdown.w_prior)) throw NumericError("elbo: non-finite w-prior term");
    if (!std::isfinite(breakdown.v_prior)) throw NumericError("elbo: non-finite v-prior term");

    if (grads) {
        // theta
        nn::backward(model.spec_theta, model.theta, tr_theta, d_xhat, grads->theta);
        // beta: parameter grads plus the input gradient feeding w
        const Matrix d_w = nn::backward(model.spec_beta, model.beta, tr_beta, d_bout, grads->beta);
        // phi_w upstream: reparameterization path plus the closed-form w-prior
        const int half_w = aw.cols / 2;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dw; ++j) {
                const double sd = std::exp(0.5 * qw.logvar(i, j));
                double dmu = d_w(i, j);
                double dlv = d_w(i, j) * 0.5 * sd * eps_w(i, j);
                dmu += -weights.w_prior * scale * qw.mean(i, j);
                dlv += -weights.w_prior * scale * 0.5 * (std::exp(qw.logvar(i, j)) - 1.0);
                d_aw(i, j) = dmu;
                d_aw(i, half_w + j) = dlv * qw.clamp_mask(i, j);
            }
        nn::backward(model.spec_phi_w, model.phi_w, tr_phi_w, d_aw, grads->phi_w);
    }
    return breakdown;
}

ElboBreakdown elbo(const GmvaeModel& model, const Matrix& x, const std::vector<int>& class_indices,
                   int mc_samples, RngStream& rng) {
    require(mc_samples >= 1, "elbo: mc_samples must be >= 1");
    double recon = 0.0, cover = 0.0, wp = 0.0, vp = 0.0;
    for (int s = 0; s < mc_samples; ++s) {
        Matrix eps_z(x.rows, model.config.dim_z), eps_w(x.rows, model.config.dim_w);
        for (double& e : eps_z.data) e = rng.normal();
        for (double& e : eps_w.data) e = rng.normal();
        const ElboBreakdown b = elbo_fixed_noise(model, x, class_indices, eps_z, eps_w);
        recon += b.reconstruction;
        cover += b.latent_covering;
        wp += b.w_prior;
        vp += b.v_prior;
    }
    return ElboBreakdown::assemble(recon / mc_samples, cover / mc_samples, wp / mc_samples,
                                   vp / mc_samples);
}

namespace {

/// Maps dataset label ids onto model class indices (position in known_ids).
std::vector<int> class_index_map(const EncodedDataset& ds, const std::vector<int>& known_ids) {
    std::vector<int> map(ds.class_names.size(), -1);
    for (std::size_t i = 0; i < known_ids.size(); ++i) {
        require(known_ids[i] >= 0 && known_ids[i] < static_cast<int>(map.size()),
                "unknown class id in known_ids");
        map[known_ids[i]] = static_cast<int>(i);
    }
    return map;
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
    Matrix out(static_cast<int>(rows.size()), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < m.cols; ++j) out(static_cast<int>(i), j) = m(rows[i], j);
    return out;
}

std::vector<int> gather_class_indices(const EncodedDataset& ds, const std::vector<int>& rows,
                                      const std::vector<int>& index_map) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (int r : rows) {
        const int idx = index_map[ds.labels[r]];
        require(idx >= 0, "row with a non-known class in a known-only split");
        out.push_back(idx);
    }
    return out;
}

std::vector<std::vector<int>> make_batches(std::vector<int> order, int batch_size, RngStream& rng) {
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    return batches;
}

}  // namespace

PretrainLog pretrain_phi_z(GmvaeModel& model, const EncodedDataset& ds,
                           const std::vector<int>& train_rows, const std::vector<int>& known_ids,
                           int epochs, const TrainConfig& cfg, std::uint64_t seed) {
    require(!model.phi_z_frozen, "pretrain_phi_z: phi_z is already frozen");
    require(static_cast<int>(known_ids.size()) == model.config.n_classes,
            "pretrain_phi_z: known_ids must match the configured class count");
    const auto index_map = class_index_map(ds, known_ids);
    for (int cls : known_ids)
        require(!ds.rows_of_class(cls, train_rows).empty(),
                "pretrain_phi_z: empty class " + std::to_string(cls) + " in training data");

    RngStream rng(derive_seed(seed, "pretrain"));
    const int c_out = model.config.n_classes;
    nn::MlpSpec head_spec = nn::MlpSpec::stack({model.config.dim_z, c_out}, nn::Activation::identity);
    nn::MlpParams head = nn::MlpParams::init(head_spec, rng);

    nn::AdamConfig adam_cfg;
    adam_cfg.learning_rate = cfg.learning_rate;
    nn::AdamState phi_state = nn::AdamState::init(model.spec_phi_z, adam_cfg);
    nn::AdamState head_state = nn::AdamState::init(head_spec, adam_cfg);

    auto dataset_loss = [&]() {
        const Matrix x = gather_rows(ds.features, train_rows);
        const auto targets = gather_class_indices(ds, train_rows, index_map);
        const GaussianBatch q = encode_z(model, x);
        const Matrix logits = nn::forward_infer(head_spec, head, q.mean);
        double ce = 0.0;
        for (int i = 0; i < logits.rows; ++i) {
            const double lse = log_sum_exp(logits.row(i));
            ce += lse - logits(i, targets[i]);
        }
        return ce / logits.rows;
    };

    PretrainLog log;
    log.initial_loss = dataset_loss();

    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (const auto& batch : make_batches(train_rows, cfg.batch_size, rng)) {
            const Matrix x = gather_rows(ds.features, batch);
            const auto targets = gather_class_indices(ds, batch, index_map);
            const int nb = x.rows;

            nn::ForwardTrace tr_z, tr_head;
            const Matrix az = nn::forward(model.spec_phi_z, model.phi_z, x, nn::Mode::train,
                                          nullptr, &tr_z);
            const GaussianBatch q = split_gaussian_head(az);
            const Matrix logits =
                nn::forward(head_spec, head, q.mean, nn::Mode::train, nullptr, &tr_head);

            Matrix d_logits(nb, c_out);
            for (int i = 0; i < nb; ++i) {
                const double lse = log_sum_exp(logits.row(i));
                for (int j = 0; j < c_out; ++j) {
                    const double p = std::exp(logits(i, j) - lse);
                    d_logits(i, j) = (p - (j == targets[i] ? 1.0 : 0.0)) / nb;
                }
            }
            nn::MlpGrads head_grads = nn::zeros_like(head_spec);
            const Matrix d_mean = nn::backward(head_spec, head, tr_head, d_logits, head_grads);

            // the head reads only the mean half; the log-variance half gets no signal
            Matrix d_az(nb, az.cols);
            for (int i = 0; i < nb; ++i)
                for (int j = 0; j < model.config.dim_z; ++j) d_az(i, j) = d_mean(i, j);
            nn::MlpGrads z_grads = nn::zeros_like(model.spec_phi_z);
            nn::backward(model.spec_phi_z, model.phi_z, tr_z, d_az, z_grads);

            nn::adam_step(head, head_grads, head_state);
            nn::adam_step(model.phi_z, z_grads, phi_state);
        }
    }
    log.final_loss = dataset_loss();
    model.phi_z_frozen = true;
    return log;
}

std::vector<EpochLog> train_gmvae(GmvaeModel& model, const EncodedDataset& ds,
                                  const std::vector<int>& train_rows,
                                  const std::vector<int>& val_rows,
                                  const std::vector<int>& known_ids, const TrainConfig& cfg,
                                  std::uint64_t seed) {
    require(model.phi_z_frozen, "train_gmvae: phi_z must be pretrained and frozen first");
    const auto index_map = class_index_map(ds, known_ids);
    require(!train_rows.empty() && !val_rows.empty(), "train_gmvae: empty split");

    RngStream rng(derive_seed(seed, "train-gmvae"));
    nn::AdamConfig adam_cfg;
    adam_cfg.learning_rate = cfg.learning_rate;
    nn::AdamState st_theta = nn::AdamState::init(model.spec_theta, adam_cfg);
    nn::AdamState st_beta = nn::AdamState::init(model.spec_beta, adam_cfg);
    nn::AdamState st_phi_w = nn::AdamState::init(model.spec_phi_w, adam_cfg);

    const Matrix val_x = gather_rows(ds.features, val_rows);
    const auto val_targets = gather_class_indices(ds, val_rows, index_map);

    auto validation_objective = [&](int epoch) {
        RngStream vrng(derive_seed(derive_seed(seed, "gmvae-val"), static_cast<std::uint64_t>(epoch)));
        return -elbo(model, val_x, val_targets, cfg.mc_samples, vrng).total;
    };

    std::vector<EpochLog> log;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;
    auto snapshot_theta = model.theta;
    auto snapshot_beta = model.beta;
    auto snapshot_phi_w = model.phi_w;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double e_recon = 0.0, e_cover = 0.0, e_wp = 0.0, e_vp = 0.0;
        int seen = 0;
        bool diverged = false;
        for (const auto& batch : make_batches(train_rows, cfg.batch_size, rng)) {
            const Matrix x = gather_rows(ds.features, batch);
            const auto targets = gather_class_indices(ds, batch, index_map);

            GmvaeGrads grads{nn::zeros_like(model.spec_theta), nn::zeros_like(model.spec_beta),
                             nn::zeros_like(model.spec_phi_w)};
            double recon = 0.0, cover = 0.0, wp = 0.0, vp = 0.0;
            try {
                for (int s = 0; s < cfg.mc_samples; ++s) {
                    Matrix eps_z(x.rows, model.config.dim_z), eps_w(x.rows, model.config.dim_w);
                    for (double& e : eps_z.data) e = rng.normal();
                    for (double& e : eps_w.data) e = rng.normal();
                    const ElboBreakdown b =
                        elbo_fixed_noise(model, x, targets, eps_z, eps_w, {}, &grads);
                    recon += b.reconstruction;
                    cover += b.latent_covering;
                    wp += b.w_prior;
                    vp += b.v_prior;
                }
                // minimize the negative ELBO, averaged over draws
                const double g_scale = -1.0 / cfg.mc_samples;
                scale_grads(grads.theta, g_scale);
                scale_grads(grads.beta, g_scale);
                scale_grads(grads.phi_w, g_scale);
                nn::adam_step(model.theta, grads.theta, st_theta);
                nn::adam_step(model.beta, grads.beta, st_beta);
                nn::adam_step(model.phi_w, grads.phi_w, st_phi_w);
            } catch (const NumericError&) {
                diverged = true;
                break;
            }
            e_recon += recon / cfg.mc_samples * x.rows;
            e_cover += cover / cfg.mc_samples * x.rows;
            e_wp += wp / cfg.mc_samples * x.rows;
            e_vp += vp / cfg.mc_samples * x.rows;
            seen += x.rows;
        }
        if (diverged) break;  // the best snapshot is restored below

        EpochLog entry;
        entry.epoch = epoch;
        entry.train = ElboBreakdown::assemble(e_recon / seen, e_cover / seen, e_wp / seen, e_vp / seen);
        try {
            entry.validation_objective = validation_objective(epoch);
        } catch (const NumericError&) {
            break;  // poisoned epoch, same abort path
        }
        log.push_back(entry);

        if (entry.validation_objective < best_val) {
            best_val = entry.validation_objective;
            epochs_since_best = 0;
            snapshot_theta = model.theta;
            snapshot_beta = model.beta;
            snapshot_phi_w = model.phi_w;
        } else {
            ++epochs_since_best;
            if (epochs_since_best > cfg.patience) break;
        }
    }
    model.theta = snapshot_theta;
    model.beta = snapshot_beta;
    model.phi_w = snapshot_phi_w;
    return log;
}

Matrix embed(const GmvaeModel& model, const Matrix& x) {
    return encode_z(model, x).mean;
}

CentroidSet class_centroids(const GmvaeModel& model, const EncodedDataset& ds,
                            const std::vector<int>& train_rows, const std::vector<int>& known_ids) {
    CentroidSet set;
    set.class_ids = known_ids;
    set.centroids = Matrix(static_cast<int>(known_ids.size()), model.config.dim_z);
    for (std::size_t c = 0; c < known_ids.size(); ++c) {
        const auto rows = ds.rows_of_class(known_ids[c], train_rows);
        require(!rows.empty(), "class_centroids: class " + std::to_string(known_ids[c]) + " is empty");
        const Matrix e = embed(model, gather_rows(ds.features, rows));
        for (int j = 0; j < e.cols; ++j) {
            double m = 0.0;
            for (int i = 0; i < e.rows; ++i) m += e(i, j);
            set.centroids(static_cast<int>(c), j) = m / e.rows;
        }
    }
    set.validate();
    return set;
}

nlohmann::json model_to_json(const GmvaeModel& model) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : model.config.blocks)
        blocks.push_back({{"source", b.source},
                          {"start", b.start},
                          {"width", b.width},
                          {"likelihood", b.likelihood == Likelihood::gaussian ? "gaussian" : "bernoulli"}});
    nlohmann::json jc = {{"n_classes", model.config.n_classes},
                         {"components_per_class", model.config.components_per_class},
                         {"dim_z", model.config.dim_z},
                         {"dim_w", model.config.dim_w},
                         {"phi_z_hidden", model.config.phi_z_hidden},
                         {"beta_hidden", model.config.beta_hidden},
                         {"blocks", blocks}};
    if (!model.config.component_prior.empty()) jc["component_prior"] = model.config.component_prior;
    return {{"format", "osr-gmvae-v1"},
            {"config", jc},
            {"phi_z_frozen", model.phi_z_frozen},
            {"phi_z", serialize::params_to_json(model.spec_phi_z, model.phi_z)},
            {"phi_w", serialize::params_to_json(model.spec_phi_w, model.phi_w)},
            {"beta", serialize::params_to_json(model.spec_beta, model.beta)},
            {"theta", serialize::params_to_json(model.spec_theta, model.theta)}};
}

GmvaeModel model_from_json(const nlohmann::json& j) {
    require(j.at("format").get<std::string>() == "osr-gmvae-v1", "not a gmvae checkpoint");
    const auto& jc = j.at("config");
    GmvaeConfig cfg;
    cfg.n_classes = jc.at("n_classes").get<int>();
    cfg.components_per_class = jc.at("components_per_class").get<std::vector<int>>();
    cfg.dim_z = jc.at("dim_z").get<int>();
    cfg.dim_w = jc.at("dim_w").get<int>();
    cfg.phi_z_hidden = jc.at("phi_z_hidden").get<std::vector<int>>();
    cfg.beta_hidden = jc.at("beta_hidden").get<std::vector<int>>();
    if (jc.contains("component_prior")) cfg.component_prior = jc.at("component_prior").get<std::vector<Vec>>();
    for (const auto& jb : jc.at("blocks")) {
        FeatureBlock b;
        b.source = jb.at("source").get<std::string>();
        b.start = jb.at("start").get<int>();
        b.width = jb.at("width").get<int>();
        b.likelihood = jb.at("likelihood").get<std::string>() == "gaussian" ? Likelihood::gaussian
                                                                            : Likelihood::bernoulli;
        cfg.blocks.push_back(std::move(b));
    }

    GmvaeModel m;
    m.config = cfg;
    m.spec_phi_z = serialize::spec_from_json(j.at("phi_z").at("spec"));
    m.spec_phi_w = serialize::spec_from_json(j.at("phi_w").at("spec"));
    m.spec_beta = serialize::spec_from_json(j.at("beta").at("spec"));
    m.spec_theta = serialize::spec_from_json(j.at("theta").at("spec"));
    m.phi_z = serialize::params_from_json(m.spec_phi_z, j.at("phi_z"));
    m.phi_w = serialize::params_from_json(m.spec_phi_w, j.at("phi_w"));
    m.beta = serialize::params_from_json(m.spec_beta, j.at("beta"));
    m.theta = serialize::params_from_json(m.spec_theta, j.at("theta"));
    m.phi_z_frozen = j.at("phi_z_frozen").get<bool>();
    cfg.validate();
    return m;
}

}  // namespace osr::gmvae
