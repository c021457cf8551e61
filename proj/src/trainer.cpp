#include "pslab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pslab/metrics.hpp"
#include "pslab/rng.hpp"

namespace pslab {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kSigmoidClamp = 1e-6;
constexpr double kMuFloor = 1e-3;

double logit_of(double p) {
    const double c = std::clamp(p, 1e-6, 1.0 - 1e-6);
    return std::log(c / (1.0 - c));
}

}  // namespace

double reg_path_loss(const Embedding& visual_row, const Embedding& token, double mu,
                     const BoxHead& head, const Box& gt, RegPathGrads* grads) {
    const std::size_t dim = visual_row.size();
    if (token.size() != dim) throw std::invalid_argument("reg_path_loss: dimension mismatch");
    if (!(mu > 0.0)) throw std::invalid_argument("reg_path_loss: mu must be positive");

    const double s = cosine(visual_row, token);
    const double scale = std::exp(-(1.0 - s) / (2.0 * mu * mu));

    Embedding f_pro(dim), f_multi(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        f_pro[d] = scale * visual_row[d];
        f_multi[d] = std::tanh(f_pro[d]) * token[d];
    }

    double raw_sig[4];
    double squashed[4];
    bool clamped[4];
    for (std::size_t r = 0; r < 4; ++r) {
        double acc = head.bias[r];
        for (std::size_t d = 0; d < dim; ++d) acc += head.weight(r, d) * f_multi[d];
        raw_sig[r] = sigmoid(acc);
        squashed[r] = std::clamp(raw_sig[r], kSigmoidClamp, 1.0 - kSigmoidClamp);
        clamped[r] = squashed[r] != raw_sig[r];
    }
    const double cx = squashed[0], cy = squashed[1], w = squashed[2], h = squashed[3];
    const double x1 = cx * (1.0 - w);
    const double y1 = cy * (1.0 - h);
    const Box pred(x1, y1, x1 + w, y1 + h);
    const double loss = box_loss(pred, gt);
    if (!grads) return loss;

    if (grads->d_visual.size() != dim) grads->d_visual.assign(dim, 0.0);
    if (grads->d_token.size() != dim) grads->d_token.assign(dim, 0.0);
    if (grads->d_weight.rows != 5 || grads->d_weight.cols != dim) grads->d_weight = Mat(5, dim);
    if (grads->d_bias.size() != 5) grads->d_bias.assign(5, 0.0);

    const std::array<double, 4> dc = box_loss_grad(pred, gt);  // d/d(x1,y1,x2,y2)
    const double dcx = (dc[0] + dc[2]) * (1.0 - w);
    const double dcy = (dc[1] + dc[3]) * (1.0 - h);
    const double dw = dc[0] * (-cx) + dc[2] * (1.0 - cx);
    const double dh = dc[1] * (-cy) + dc[3] * (1.0 - cy);
    const double dsq[4] = {dcx, dcy, dw, dh};

    double dz[4];
    for (std::size_t r = 0; r < 4; ++r)
        dz[r] = clamped[r] ? 0.0 : dsq[r] * raw_sig[r] * (1.0 - raw_sig[r]);

    Embedding d_multi(dim, 0.0);
    for (std::size_t r = 0; r < 4; ++r) {
        grads->d_bias[r] += dz[r];
        for (std::size_t d = 0; d < dim; ++d) {
            grads->d_weight(r, d) += dz[r] * f_multi[d];
            d_multi[d] += dz[r] * head.weight(r, d);
        }
    }

    double d_scale = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        const double th = std::tanh(f_pro[d]);
        const double d_pro = d_multi[d] * token[d] * (1.0 - th * th);
        grads->d_token[d] += d_multi[d] * th;
        grads->d_visual[d] += scale * d_pro;
        d_scale += d_pro * visual_row[d];
    }
    const double d_s = d_scale * scale / (2.0 * mu * mu);
    grads->d_mu += d_scale * scale * (1.0 - s) / (mu * mu * mu);
    cosine_backward(visual_row, token, d_s, grads->d_visual, grads->d_token);
    return loss;
}

double oim_feature_path(const Embedding& raw, std::optional<std::int64_t> label,
                        const LookupTable& lut, const CircularQueue& cq, double temp,
                        bool use_nae, double nae_a, double nae_b, Embedding* d_raw) {
    if (!label.has_value()) return 0.0;
    const double r = norm(raw);
    if (r <= 0.0) throw std::invalid_argument("oim_feature_path: zero feature");
    const Embedding f = normalized(raw);
    const double base = oim_loss(f, label, lut, cq, temp);
    double conf = 1.0;
    if (use_nae) conf = sigmoid((r - nae_a) / nae_b);
    if (d_raw) {
        const Embedding df = oim_grad(f, label, lut, cq, temp);
        const Embedding dx_base = normalize_backward(raw, df);
        for (std::size_t i = 0; i < raw.size(); ++i) {
            double g = conf * dx_base[i];
            if (use_nae) g += base * conf * (1.0 - conf) / nae_b * (raw[i] / r);
            (*d_raw)[i] += g;
        }
    }
    return conf * base;
}

ToyTrainer::ToyTrainer(const World& world, const TrainConfig& config)
    : world_(world),
      cfg_(config),
      mu_(config.mu_init),
      head_(world.config.dim),
      bank_(config.prototypes, world.config.dim, config.proto_momentum,
            sub_seed(config.seed, "prototype_bank")),
      lut_(config.lut_momentum),
      cq_(config.cq_capacity) {
    if (world.queries.empty()) throw std::invalid_argument("ToyTrainer: world has no queries");

    for (std::size_t s = 0; s < world.scenes.size(); ++s) {
        const Scene& scene = world.scenes[s];
        for (std::size_t p = 0; p < scene.persons.size(); ++p) {
            const auto id = static_cast<std::size_t>(scene.persons[p].identity);
            instances_.push_back({s, p, scene.persons[p].identity, world.identities[id].labeled});
            visual_.push_back(scene.persons[p].appearance);
        }
    }

    text_.reserve(world.queries.size());
    for (const Query& q : world.queries) text_.push_back(q.text);

    // fixed query -> instance pairing: the k-th query of an identity takes the
    // k-th instance (wrapping), so the per-step objective is a function of the
    // parameters only
    std::map<std::int64_t, std::vector<std::size_t>> by_identity;
    for (std::size_t b = 0; b < instances_.size(); ++b)
        by_identity[instances_[b].identity].push_back(b);
    std::map<std::int64_t, std::size_t> ordinal;
    batch_instance_.reserve(world.queries.size());
    for (const Query& q : world.queries) {
        const auto& pool = by_identity.at(q.target_identity);
        const std::size_t k = ordinal[q.target_identity]++;
        batch_instance_.push_back(pool[k % pool.size()]);
    }

    // LUT entries: normalized mean of each labeled identity's initial features
    for (const auto& [identity, pool] : by_identity) {
        if (!world.identities[static_cast<std::size_t>(identity)].labeled) continue;
        Embedding mean(world.config.dim, 0.0);
        for (std::size_t b : pool) axpy(1.0, visual_[b], mean);
        lut_.insert(identity, normalized(mean));
    }

    mue_constant_ = cfg_.include_mue ? constant_mue_loss() : 0.0;
}

double ToyTrainer::constant_mue_loss() const {
    double total = 0.0;
    for (const Scene& scene : world_.scenes) {
        const SceneProposals props = generate_proposals(scene, world_.config);
        std::vector<Prediction> preds;
        preds.reserve(props.mue.size());
        for (const Proposal& p : props.mue)
            preds.push_back({p.candidate.box, logit_of(p.candidate.confidence), 0.0});
        std::vector<GtBox> gts;
        gts.reserve(scene.persons.size());
        for (const ScenePerson& p : scene.persons) gts.push_back({p.box, 0});
        // fixed-slot decoder convention: pad with low-confidence center boxes
        // so every target has a slot to match
        while (preds.size() < gts.size())
            preds.push_back({Box(0.25, 0.25, 0.75, 0.75), -4.0, 0.0});
        total += mue_loss(preds, gts);
    }
    return total / static_cast<double>(world_.scenes.size());
}

ComponentLosses ToyTrainer::evaluate(ParamGrads* grads, double s_pud, double s_reid) const {
    const std::size_t dim = world_.config.dim;
    const std::size_t n_queries = text_.size();
    if (grads) {
        grads->d_visual.assign(visual_.size(), Embedding(dim, 0.0));
        grads->d_text.assign(text_.size(), Embedding(dim, 0.0));
        grads->d_mu = 0.0;
        grads->d_head_weight = Mat(5, dim);
        grads->d_head_bias.assign(5, 0.0);
    }

    ComponentLosses out;
    out.mue = mue_constant_;

    // ----- class- and instance-level alignment over the paired batch -----
    Mat sim(n_queries, n_queries);
    for (std::size_t i = 0; i < n_queries; ++i)
        for (std::size_t j = 0; j < n_queries; ++j)
            sim(i, j) = cosine(visual_[batch_instance_[i]], text_[j]);
    std::vector<std::vector<bool>> positives(n_queries, std::vector<bool>(n_queries, false));
    for (std::size_t i = 0; i < n_queries; ++i)
        for (std::size_t j = 0; j < n_queries; ++j)
            positives[i][j] =
                world_.queries[i].target_identity == world_.queries[j].target_identity;

    out.sdm = sdm_kl_loss(sim, positives, cfg_.temps.rho, cfg_.temps.eps_kl);
    out.infonce = infonce_loss(sim, cfg_.temps.eps_itc);
    if (grads) {
        Mat d_sim = sdm_kl_grad(sim, positives, cfg_.temps.rho, cfg_.temps.eps_kl);
        const Mat d_info = infonce_grad(sim, cfg_.temps.eps_itc);
        for (std::size_t i = 0; i < n_queries; ++i)
            for (std::size_t j = 0; j < n_queries; ++j) {
                const double g = s_reid * (d_sim(i, j) + d_info(i, j));
                if (g != 0.0)
                    cosine_backward(visual_[batch_instance_[i]], text_[j], g,
                                    grads->d_visual[batch_instance_[i]], grads->d_text[j]);
            }
    }

    // ----- OIM over every box instance (and optionally every text) -----
    std::size_t oim_count = instances_.size() + (cfg_.oim_update_from_text ? n_queries : 0);
    double oim_sum = 0.0;
    Embedding local(dim, 0.0);
    for (std::size_t b = 0; b < instances_.size(); ++b) {
        std::optional<std::int64_t> label;
        if (instances_[b].labeled) label = instances_[b].identity;
        if (grads) {
            std::fill(local.begin(), local.end(), 0.0);
            oim_sum += oim_feature_path(visual_[b], label, lut_, cq_, cfg_.oim_temp, cfg_.use_nae,
                                        cfg_.nae_a, cfg_.nae_b, &local);
            axpy(s_reid / static_cast<double>(oim_count), local, grads->d_visual[b]);
        } else {
            oim_sum += oim_feature_path(visual_[b], label, lut_, cq_, cfg_.oim_temp, cfg_.use_nae,
                                        cfg_.nae_a, cfg_.nae_b, nullptr);
        }
    }
    if (cfg_.oim_update_from_text) {
        for (std::size_t j = 0; j < n_queries; ++j) {
            const std::optional<std::int64_t> label = world_.queries[j].target_identity;
            if (grads) {
                std::fill(local.begin(), local.end(), 0.0);
                oim_sum += oim_feature_path(text_[j], label, lut_, cq_, cfg_.oim_temp, cfg_.use_nae,
                                            cfg_.nae_a, cfg_.nae_b, &local);
                axpy(s_reid / static_cast<double>(oim_count), local, grads->d_text[j]);
            } else {
                oim_sum += oim_feature_path(text_[j], label, lut_, cq_, cfg_.oim_temp, cfg_.use_nae,
                                            cfg_.nae_a, cfg_.nae_b, nullptr);
            }
        }
    }
    out.oim = oim_sum / static_cast<double>(oim_count);
    out.reid = out.sdm + out.infonce + out.oim;

    // ----- regression path + prototype contrast -----
    double reg_sum = 0.0;
    std::vector<Embedding> protos;
    if (cfg_.instance_prototypes) protos.reserve(n_queries);
    RegPathGrads rg;
    for (std::size_t j = 0; j < n_queries; ++j) {
        const std::size_t b = batch_instance_[j];
        const BoxInstance& inst = instances_[b];
        const Box& gt = world_.scenes[inst.scene_index].persons[inst.person_index].box;
        if (grads) {
            rg.d_visual.assign(dim, 0.0);
            rg.d_token.assign(dim, 0.0);
            rg.d_mu = 0.0;
            rg.d_weight = Mat(5, dim);
            rg.d_bias.assign(5, 0.0);
            reg_sum += reg_path_loss(visual_[b], text_[j], mu_, head_, gt, &rg);
            const double w = s_pud / static_cast<double>(n_queries);
            axpy(w, rg.d_visual, grads->d_visual[b]);
            axpy(w, rg.d_token, grads->d_text[j]);
            grads->d_mu += w * rg.d_mu;
            for (std::size_t i = 0; i < rg.d_weight.data.size(); ++i)
                grads->d_head_weight.data[i] += w * rg.d_weight.data[i];
            for (std::size_t i = 0; i < 5; ++i) grads->d_head_bias[i] += w * rg.d_bias[i];
        } else {
            reg_sum += reg_path_loss(visual_[b], text_[j], mu_, head_, gt, nullptr);
        }

        if (cfg_.instance_prototypes) {
            const double s = cosine(visual_[b], text_[j]);
            const double scale = std::exp(-(1.0 - s) / (2.0 * mu_ * mu_));
            Embedding f_pro = visual_[b];
            for (double& x : f_pro) x *= scale;
            protos.push_back(bank_.prototype(bank_.assign(f_pro)));
        }
    }
    out.reg = reg_sum / static_cast<double>(n_queries);

    if (cfg_.instance_prototypes) {
        out.ptc = ptc_loss(protos, text_, cfg_.tau_ptc);
        if (grads) {
            // the bank is a momentum memory: gradient flows to the text side only
            const PtcGrads pg = ptc_grad(protos, text_, cfg_.tau_ptc);
            for (std::size_t j = 0; j < n_queries; ++j)
                axpy(s_pud, pg.d_texts[j], grads->d_text[j]);
        }
    }
    out.pud = out.ptc + out.reg;
    return out;
}

void ToyTrainer::apply_state_updates() {
    // synchronous end-of-step updates, fixed order for determinism
    for (std::size_t b = 0; b < instances_.size(); ++b) {
        const Embedding f = normalized(visual_[b]);
        if (instances_[b].labeled)
            lut_.update(instances_[b].identity, f);
        else
            cq_.push(f);
    }
    if (cfg_.oim_update_from_text)
        for (std::size_t j = 0; j < text_.size(); ++j)
            lut_.update(world_.queries[j].target_identity, normalized(text_[j]));

    if (cfg_.instance_prototypes) {
        std::vector<std::pair<std::size_t, Embedding>> assigned;
        assigned.reserve(text_.size());
        for (std::size_t j = 0; j < text_.size(); ++j) {
            const std::size_t b = batch_instance_[j];
            const double s = cosine(visual_[b], text_[j]);
            const double scale = std::exp(-(1.0 - s) / (2.0 * mu_ * mu_));
            Embedding f_pro = visual_[b];
            for (double& x : f_pro) x *= scale;
            assigned.emplace_back(bank_.assign(f_pro), std::move(f_pro));
        }
        bank_.update(assigned);
    }
}

double ToyTrainer::davies_bouldin_image() const {
    std::vector<Embedding> points;
    std::vector<std::int64_t> labels;
    for (std::size_t b = 0; b < instances_.size(); ++b) {
        if (!instances_[b].labeled) continue;
        points.push_back(normalized(visual_[b]));
        labels.push_back(instances_[b].identity);
    }
    return davies_bouldin(points, labels);
}

double ToyTrainer::davies_bouldin_text() const {
    std::vector<Embedding> points;
    std::vector<std::int64_t> labels;
    for (std::size_t j = 0; j < text_.size(); ++j) {
        points.push_back(normalized(text_[j]));
        labels.push_back(world_.queries[j].target_identity);
    }
    return davies_bouldin(points, labels);
}

std::vector<double> ToyTrainer::pack_params() const {
    std::vector<double> flat;
    for (const Embedding& v : visual_) flat.insert(flat.end(), v.begin(), v.end());
    for (const Embedding& t : text_) flat.insert(flat.end(), t.begin(), t.end());
    flat.push_back(mu_);
    flat.insert(flat.end(), head_.weight.data.begin(), head_.weight.data.end());
    flat.insert(flat.end(), head_.bias.begin(), head_.bias.end());
    return flat;
}

void ToyTrainer::unpack_params(const std::vector<double>& flat) {
    std::size_t pos = 0;
    for (Embedding& v : visual_)
        for (double& x : v) x = flat[pos++];
    for (Embedding& t : text_)
        for (double& x : t) x = flat[pos++];
    mu_ = flat[pos++];
    for (double& x : head_.weight.data) x = flat[pos++];
    for (double& x : head_.bias) x = flat[pos++];
    if (pos != flat.size()) throw std::invalid_argument("unpack_params: size mismatch");
}

TrainResult ToyTrainer::run() {
    TrainResult result;
    result.db_image_initial = davies_bouldin_image();
    result.db_text_initial = davies_bouldin_text();

    LossWeights weights = cfg_.weights;
    ParamGrads grads;
    for (std::size_t step = 0; step < cfg_.steps; ++step) {
        const std::array<double, 3> s = normalized_weights(weights);
        const ComponentLosses c = evaluate(&grads, s[1], s[2]);
        weights.observe(c.mue, c.pud, c.reid);
        const double l_total = total_loss(c.mue, c.pud, c.reid, weights);

        if (!std::isfinite(l_total) || !std::isfinite(c.pud) || !std::isfinite(c.reid)) {
            std::ostringstream msg;
            msg << "ToyTrainer diverged at step " << step << ": total=" << l_total
                << " pud=" << c.pud << " reid=" << c.reid;
            throw std::runtime_error(msg.str());
        }

        result.total_per_step.push_back(l_total);
        if (step % cfg_.record_every == 0) {
            CurvePoint pt;
            pt.step = step;
            pt.l_total = l_total;
            pt.components = c;
            pt.alpha_mue = weights.alpha_mue;
            pt.alpha_pud = weights.alpha_pud;
            pt.alpha_reid = weights.alpha_reid;
            pt.db_image = davies_bouldin_image();
            pt.db_text = davies_bouldin_text();
            result.curve.push_back(pt);
        }

        for (std::size_t b = 0; b < visual_.size(); ++b)
            axpy(-cfg_.lr, grads.d_visual[b], visual_[b]);
        for (std::size_t j = 0; j < text_.size(); ++j) axpy(-cfg_.lr, grads.d_text[j], text_[j]);
        mu_ = std::max(mu_ - cfg_.lr * grads.d_mu, kMuFloor);
        for (std::size_t i = 0; i < head_.weight.data.size(); ++i)
            head_.weight.data[i] -= cfg_.lr * grads.d_head_weight.data[i];
        for (std::size_t i = 0; i < 5; ++i) head_.bias[i] -= cfg_.lr * grads.d_head_bias[i];

        apply_state_updates();
    }

    result.db_image_final = davies_bouldin_image();
    result.db_text_final = davies_bouldin_text();
    return result;
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_curve_csv: cannot open " + path);
    out << "step,l_total,l_mue,l_pud,l_reid,ptc,reg,sdm,infonce,oim,"
           "alpha_mue,alpha_pud,alpha_reid,db_image,db_text\n";
    char buf[512];
    for (const CurvePoint& p : curve) {
        std::snprintf(buf, sizeof(buf),
                      "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                      p.step, p.l_total, p.components.mue, p.components.pud, p.components.reid,
                      p.components.ptc, p.components.reg, p.components.sdm, p.components.infonce,
                      p.components.oim, p.alpha_mue, p.alpha_pud, p.alpha_reid, p.db_image,
                      p.db_text);
        out << buf;
    }
}

void ToyTrainer::save_checkpoint(const std::string& path) const {
    ordered_json j;
    j["mu"] = mu_;
    j["head_weight"] = head_.weight.data;
    j["head_bias"] = head_.bias;
    j["visual"] = visual_;
    j["text"] = text_;
    j["bank"] = bank_.snapshot();
    std::vector<std::uint64_t> counts(bank_.size());
    for (std::size_t k = 0; k < bank_.size(); ++k) counts[k] = bank_.usage_count(k);
    j["bank_counts"] = counts;
    ordered_json lut = ordered_json::array();
    for (std::size_t k = 0; k < lut_.size(); ++k)
        lut.push_back(ordered_json{{"label", lut_.label_at(k)}, {"feature", lut_.entry(k)}});
    j["lut"] = lut;
    ordered_json cq = ordered_json::array();
    for (std::size_t k = 0; k < cq_.size(); ++k) cq.push_back(cq_.entry(k));
    j["cq"] = cq;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << j.dump() << '\n';
}

}  // namespace pslab
