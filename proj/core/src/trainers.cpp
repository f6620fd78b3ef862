#include "fewflow/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fewflow/rng.hpp"

namespace fewflow {

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(B);
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < C; ++j) {
            if (logits.values()[i * C + j] > logits.values()[i * C + best]) best = j;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

// eval-mode embeddings, chunked to bound peak memory
Tensor embed_eval(Encoder& enc, const Dataset& data, const std::vector<std::size_t>& idx,
                  std::size_t chunk = 256) {
    NoGradGuard ng;
    const std::size_t d = enc.spec().latent_dim;
    std::vector<double> vals;
    vals.reserve(idx.size() * d);
    for (std::size_t off = 0; off < idx.size(); off += chunk) {
        std::vector<std::size_t> part(idx.begin() + off,
                                      idx.begin() + std::min(idx.size(), off + chunk));
        Tensor z = enc.forward(to_batch(data, part), /*training=*/false);
        vals.insert(vals.end(), z.values().begin(), z.values().end());
    }
    return Tensor({idx.size(), d}, std::move(vals));
}

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
    const std::size_t d = m.dim(1);
    std::vector<double> vals;
    vals.reserve(rows.size() * d);
    for (std::size_t r : rows) {
        vals.insert(vals.end(), m.values().begin() + r * d, m.values().begin() + (r + 1) * d);
    }
    return Tensor({rows.size(), d}, std::move(vals));
}

// full parameter/buffer snapshot for best-checkpoint selection
struct Snapshot {
    std::vector<std::vector<double>> values;
    std::vector<BatchNormState> bns;
};

Snapshot take_snapshot(const Encoder& enc, const std::vector<Tensor>& extra) {
    Snapshot s;
    for (const Tensor& p : enc.params()) s.values.push_back(p.values());
    for (const Tensor& p : extra) s.values.push_back(p.values());
    for (const auto& blk : enc.blocks()) s.bns.push_back(blk.bn);
    return s;
}

void restore_snapshot(const Snapshot& s, Encoder& enc, std::vector<Tensor>& extra) {
    auto ps = enc.params();
    std::size_t i = 0;
    for (Tensor& p : ps) p.mutable_values() = s.values[i++];
    for (Tensor& p : extra) p.mutable_values() = s.values[i++];
    for (std::size_t b = 0; b < enc.blocks().size(); ++b) enc.blocks()[b].bn = s.bns[b];
}

std::vector<int> sorted_classes_of(const Dataset& data, const std::vector<std::size_t>& idx) {
    std::set<int> classes;
    for (std::size_t i : idx) classes.insert(data.samples[i].label);
    return std::vector<int>(classes.begin(), classes.end());
}

OptimConfig optim_config(const TrainConfig& cfg) {
    OptimConfig oc;
    oc.kind = cfg.optimizer;
    oc.learning_rate = cfg.learning_rate;
    oc.schedule = cfg.lr_schedule;
    oc.halve_every = cfg.lr_halve_every;
    return oc;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, Rng rng) {
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (temperature <= 0) throw ConfigError("temperature must be > 0");
    if (distill_temperature < 1) throw ConfigError("distill temperature must be >= 1");
    if (distill_alpha < 0 || distill_alpha > 1) throw ConfigError("distill alpha must be in [0,1]");
    if (!(learning_rate > 0) || !(inner_lr >= 0) || !(finetune_lr > 0)) {
        throw ConfigError("learning rates must be positive");
    }
    augment.validate();
}

std::string head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::linear: return "linear";
        case HeadKind::class_embedding: return "class_embedding";
        case HeadKind::logistic: return "logistic";
        case HeadKind::nearest_neighbor: return "nearest_neighbor";
        case HeadKind::prototype: return "prototype";
        case HeadKind::relation: return "relation";
        case HeadKind::maml: return "maml";
    }
    throw ContractError("unknown head kind");
}

HeadKind head_kind_from(const std::string& name) {
    for (HeadKind k : {HeadKind::linear, HeadKind::class_embedding, HeadKind::logistic,
                       HeadKind::nearest_neighbor, HeadKind::prototype, HeadKind::relation,
                       HeadKind::maml}) {
        if (head_kind_name(k) == name) return k;
    }
    throw ConfigError("unknown head kind '" + name + "'");
}

HeadKind default_head_for(const std::string& method) {
    if (method == "baseline" || method == "monolithic") return HeadKind::linear;
    if (method == "baseline_classemb") return HeadKind::class_embedding;
    if (method == "baseline_lr" || method == "rfs_distill_lr") return HeadKind::logistic;
    if (method == "baseline_nn" || method == "rfs_distill_nn") return HeadKind::nearest_neighbor;
    if (method == "rfs_distill") return HeadKind::nearest_neighbor;
    if (method == "protonet") return HeadKind::prototype;
    if (method == "relationnet") return HeadKind::relation;
    if (method == "maml") return HeadKind::maml;
    if (method == "simclr" || method == "supcon" || method == "simclr_classemb" ||
        method == "supcon_classemb") {
        return HeadKind::nearest_neighbor;
    }
    throw ConfigError("no default head for method '" + method + "'");
}

std::vector<int> local_labels(const Dataset& data, const std::vector<std::size_t>& idx,
                              const std::vector<int>& classes) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        auto it = std::find(classes.begin(), classes.end(), data.samples[i].label);
        if (it == classes.end()) {
            throw ContractError("sample label " + std::to_string(data.samples[i].label) +
                                " not in the trained class set");
        }
        out.push_back(static_cast<int>(it - classes.begin()));
    }
    return out;
}

double classifier_balanced_accuracy(Encoder& enc, const std::function<Tensor(const Tensor&)>& head,
                                    const Dataset& data, const std::vector<std::size_t>& idx,
                                    const std::vector<int>& classes, std::size_t batch_size,
                                    ConfusionMatrix* cm_out) {
    NoGradGuard ng;
    ConfusionMatrix cm(classes.size());
    for (std::size_t off = 0; off < idx.size(); off += batch_size) {
        std::vector<std::size_t> part(idx.begin() + off,
                                      idx.begin() + std::min(idx.size(), off + batch_size));
        Tensor z = enc.forward(to_batch(data, part), false);
        std::vector<int> pred = argmax_rows(head(z));
        std::vector<int> truth = local_labels(data, part, classes);
        for (std::size_t i = 0; i < part.size(); ++i) cm.add(truth[i], pred[i]);
    }
    if (cm_out != nullptr) *cm_out = cm;
    return balanced_accuracy(cm);
}

// ---------------------------------------------------------------------------
// Contrastive losses
// ---------------------------------------------------------------------------

namespace {

// log sum_{k != i} exp(S_ik), columnwise-masked diagonal
Tensor masked_row_lse(const Tensor& s) {
    const std::size_t M = s.dim(0);
    std::vector<double> diag(M * M, 0.0);
    for (std::size_t i = 0; i < M; ++i) diag[i * M + i] = -1e9;  // exp underflows to 0
    Tensor masked = add(s, Tensor({M, M}, std::move(diag)));
    Tensor m = row_max_detached(masked);
    Tensor lse = log_t(sum(exp_t(sub(masked, m)), {1}, /*keepdims=*/true));
    return add(lse, m);  // [M,1]
}

}  // namespace

Tensor simclr_loss(const Tensor& z, const std::vector<int>& pair, double temperature) {
    if (temperature <= 0) throw ConfigError("simclr_loss: temperature must be > 0");
    if (z.ndim() != 2 || z.dim(0) != pair.size()) {
        throw ContractError("simclr_loss: pairing does not match batch");
    }
    const std::size_t M = z.dim(0);
    Tensor zn = l2_normalize(z);
    Tensor s = scalar_scale(matmul(zn, transpose(zn)), 1.0 / temperature);

    std::vector<double> pos_sel(M * M, 0.0);
    std::vector<double> anchor(M, 0.0);
    std::size_t n_anchors = 0;
    for (std::size_t i = 0; i < M; ++i) {
        if (pair[i] < 0) continue;
        const auto p = static_cast<std::size_t>(pair[i]);
        if (p >= M || p == i) throw ContractError("simclr_loss: invalid positive index");
        pos_sel[i * M + p] = 1.0;
        anchor[i] = 1.0;
        n_anchors++;
    }
    if (n_anchors == 0) throw ContractError("simclr_loss: no anchor has a positive");

    Tensor pos = sum(mul(s, Tensor({M, M}, std::move(pos_sel))), {1}, /*keepdims=*/true);
    Tensor per_anchor = sub(masked_row_lse(s), pos);  // [M,1], -log softmax of the positive
    Tensor picked = mul(per_anchor, Tensor({M, 1}, std::move(anchor)));
    return scalar_scale(sum(picked), 1.0 / static_cast<double>(n_anchors));
}

Tensor supcon_loss(const Tensor& z, const std::vector<int>& labels, double temperature) {
    if (temperature <= 0) throw ConfigError("supcon_loss: temperature must be > 0");
    if (z.ndim() != 2 || z.dim(0) != labels.size()) {
        throw ContractError("supcon_loss: labels do not match batch");
    }
    const std::size_t M = z.dim(0);
    Tensor zn = l2_normalize(z);
    Tensor s = scalar_scale(matmul(zn, transpose(zn)), 1.0 / temperature);

    // positive averaging weights 1/|P(i)|; anchors without positives skipped
    std::vector<double> pos_w(M * M, 0.0);
    std::vector<double> anchor(M, 0.0);
    std::size_t n_anchors = 0;
    for (std::size_t i = 0; i < M; ++i) {
        std::size_t np = 0;
        for (std::size_t j = 0; j < M; ++j) {
            if (j != i && labels[j] == labels[i]) np++;
        }
        if (np == 0) continue;
        for (std::size_t j = 0; j < M; ++j) {
            if (j != i && labels[j] == labels[i]) {
                pos_w[i * M + j] = 1.0 / static_cast<double>(np);
            }
        }
        anchor[i] = 1.0;
        n_anchors++;
    }
    if (n_anchors == 0) throw ContractError("supcon_loss: no anchor has a positive");

    Tensor pos_avg = sum(mul(s, Tensor({M, M}, std::move(pos_w))), {1}, /*keepdims=*/true);
    Tensor per_anchor = sub(masked_row_lse(s), pos_avg);
    Tensor picked = mul(per_anchor, Tensor({M, 1}, std::move(anchor)));
    return scalar_scale(sum(picked), 1.0 / static_cast<double>(n_anchors));
}

Tensor distill_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                    const std::vector<int>& labels, double alpha, double temperature) {
    if (teacher_logits.shape() != student_logits.shape()) {
        throw ContractError("distill_loss: teacher/student logit shapes differ");
    }
    const double T = temperature;
    Tensor t_scaled = scalar_scale(teacher_logits.detach(), 1.0 / T);
    Tensor p = softmax(t_scaled).detach();
    Tensor p_log = log_softmax(t_scaled).detach();
    Tensor q_log = log_softmax(scalar_scale(student_logits, 1.0 / T));
    Tensor kl = scalar_scale(sum(mul(p, sub(p_log, q_log))),
                             1.0 / static_cast<double>(teacher_logits.dim(0)));
    Tensor ce = cross_entropy(student_logits, labels);
    return add(scalar_scale(ce, alpha), scalar_scale(kl, (1.0 - alpha) * T * T));
}

// ---------------------------------------------------------------------------
// Monolithic training
// ---------------------------------------------------------------------------

TrainResult train_monolithic(const Dataset& data, const MonolithicSplit& split,
                             const NormStats& norm, const EncoderSpec& spec, HeadKind head,
                             const TrainConfig& cfg) {
    cfg.validate();
    if (head != HeadKind::linear && head != HeadKind::class_embedding) {
        throw ConfigError("monolithic training uses a linear or class_embedding head");
    }
    std::vector<std::size_t> all_idx = split.fit_idx;
    all_idx.insert(all_idx.end(), split.val_idx.begin(), split.val_idx.end());
    const std::vector<int> classes = sorted_classes_of(data, all_idx);
    const std::size_t C = classes.size();

    Encoder enc(spec, derive_seed(cfg.seed, 0x01));
    LinearHead lin;
    CosineHead cos;
    std::vector<Tensor> head_params_v;
    std::function<Tensor(const Tensor&)> head_fn;
    if (head == HeadKind::linear) {
        lin = LinearHead::init(spec.latent_dim, C, derive_seed(cfg.seed, 0x02));
        head_params_v = lin.params();
        head_fn = [&lin](const Tensor& z) { return lin.logits(z); };
    } else {
        cos = CosineHead::init(spec.latent_dim, C, derive_seed(cfg.seed, 0x02));
        head_params_v = cos.params();
        head_fn = [&cos](const Tensor& z) { return cos.logits(z); };
    }
    std::vector<Tensor> params = enc.params();
    params.insert(params.end(), head_params_v.begin(), head_params_v.end());

    Optimizer opt(optim_config(cfg));
    TrainResult result;
    double best_val = -1.0;
    Snapshot best;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        auto order = shuffled(split.fit_idx, make_rng(cfg.seed, 0x10, epoch));
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<std::size_t> batch(order.begin() + off,
                                           order.begin() + std::min(order.size(),
                                                                    off + cfg.batch_size));
            Tape tape;
            Tensor z = enc.forward(to_batch(data, batch), /*training=*/true);
            Tensor loss = cross_entropy(head_fn(z), local_labels(data, batch, classes));
            auto grads = backward(loss, params);
            opt.step(params, grads);
            loss_sum += loss.item() * static_cast<double>(batch.size());
            seen += batch.size();
        }
        double val_acc = classifier_balanced_accuracy(enc, head_fn, data, split.val_idx, classes);
        result.metrics.push_back(
            {epoch, loss_sum / static_cast<double>(seen), val_acc, opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(enc, head_params_v);
        }
    }
    restore_snapshot(best, enc, head_params_v);

    SourceModel model;
    model.spec = spec;
    model.encoder = std::move(enc);
    model.norm = norm;
    model.method = head == HeadKind::linear ? "baseline" : "baseline_classemb";
    model.trained_classes = classes;
    if (head == HeadKind::linear) {
        model.linear_head = std::move(lin);
    } else {
        model.class_emb = std::move(cos);
    }
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Meta-training
// ---------------------------------------------------------------------------

namespace {

struct MetaParts {
    Tensor z_support;
    Tensor z_query;
};

// one combined forward so batch norm sees support and query together
MetaParts embed_episode(Encoder& enc, const Dataset& data, const Episode& ep, bool training) {
    std::vector<std::size_t> idx = ep.support_idx;
    idx.insert(idx.end(), ep.query_idx.begin(), ep.query_idx.end());
    Tensor z = enc.forward(to_batch(data, idx), training);
    MetaParts parts;
    parts.z_support = narrow(z, 0, 0, ep.support_idx.size());
    parts.z_query = narrow(z, 0, ep.support_idx.size(), ep.query_idx.size());
    return parts;
}

// meta-validation over a fixed episode batch, scored by the given evaluator
double meta_val_accuracy(EpisodeEvaluator& eval, const std::vector<Episode>& episodes) {
    if (episodes.empty()) return 0.0;
    double acc = 0.0;
    for (const Episode& ep : episodes) acc += eval.evaluate(ep);
    return acc / static_cast<double>(episodes.size());
}

std::vector<Episode> meta_val_episodes_for(const SplitView& val_view, const TrainConfig& cfg) {
    if (val_view.n_classes() == 0 || cfg.meta_val_episodes == 0) return {};
    const std::size_t ways = std::min(cfg.val_ways, val_view.n_classes());
    return test_episode_batch(val_view, ways, cfg.shots, cfg.queries, cfg.meta_val_episodes,
                              derive_seed(cfg.seed, 0x30));
}

SourceModel finish_meta_model(Encoder&& enc, const NormStats& norm, const EncoderSpec& spec,
                              std::string method) {
    SourceModel model;
    model.spec = spec;
    model.encoder = std::move(enc);
    model.norm = norm;
    model.method = std::move(method);
    return model;
}

}  // namespace

TrainResult meta_train_protonet(const Dataset& data, const SplitView& train_view,
                                const SplitView& val_view, const NormStats& norm,
                                const EncoderSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    EpisodeStreamConfig scfg{cfg.epochs, cfg.episodes_per_epoch, cfg.train_ways,
                             cfg.shots, cfg.queries, derive_seed(cfg.seed, 0x20)};
    EpisodeStream stream(train_view, scfg);
    Encoder enc(spec, derive_seed(cfg.seed, 0x01));
    Optimizer opt(optim_config(cfg));
    auto val_eps = meta_val_episodes_for(val_view, cfg);

    TrainResult result;
    double best_val = -1.0;
    Snapshot best;
    std::vector<Tensor> no_extra;

    std::vector<Tensor> params = enc.params();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        double loss_sum = 0.0;
        for (std::size_t m = 0; m < cfg.episodes_per_epoch; ++m) {
            Episode ep = stream.at(epoch, m);
            Tape tape;
            MetaParts parts = embed_episode(enc, data, ep, /*training=*/true);
            Tensor protos = prototypes(parts.z_support, ep.support_local, ep.ways);
            Tensor loss = cross_entropy(proto_logits(protos, parts.z_query), ep.query_local);
            auto grads = backward(loss, params);
            opt.step(params, grads);
            loss_sum += loss.item();
        }
        double val_acc = 0.0;
        if (!val_eps.empty()) {
            SourceModel probe = finish_meta_model(enc.clone(), norm, spec, "protonet");
            EpisodeEvaluator eval(probe, data, HeadKind::prototype, cfg);
            val_acc = meta_val_accuracy(eval, val_eps);
        }
        result.metrics.push_back({epoch, loss_sum / static_cast<double>(cfg.episodes_per_epoch),
                                  val_acc, opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(enc, no_extra);
        }
    }
    restore_snapshot(best, enc, no_extra);
    result.model = finish_meta_model(std::move(enc), norm, spec, "protonet");
    return result;
}

TrainResult meta_train_relationnet(const Dataset& data, const SplitView& train_view,
                                   const SplitView& val_view, const NormStats& norm,
                                   const EncoderSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    EpisodeStreamConfig scfg{cfg.epochs, cfg.episodes_per_epoch, cfg.train_ways,
                             cfg.shots, cfg.queries, derive_seed(cfg.seed, 0x20)};
    EpisodeStream stream(train_view, scfg);
    Encoder enc(spec, derive_seed(cfg.seed, 0x01));
    RelationModule rel = RelationModule::init(spec.latent_dim, 64, derive_seed(cfg.seed, 0x03));
    Optimizer opt(optim_config(cfg));
    auto val_eps = meta_val_episodes_for(val_view, cfg);

    std::vector<Tensor> rel_params = rel.params();
    std::vector<Tensor> params = enc.params();
    params.insert(params.end(), rel_params.begin(), rel_params.end());

    TrainResult result;
    double best_val = -1.0;
    Snapshot best;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        double loss_sum = 0.0;
        for (std::size_t m = 0; m < cfg.episodes_per_epoch; ++m) {
            Episode ep = stream.at(epoch, m);
            Tape tape;
            MetaParts parts = embed_episode(enc, data, ep, /*training=*/true);
            Tensor means = prototypes(parts.z_support, ep.support_local, ep.ways);
            Tensor scores = rel.scores(means, parts.z_query);
            Tensor loss = squared_error(scores, one_hot(ep.query_local, ep.ways));
            auto grads = backward(loss, params);
            opt.step(params, grads);
            loss_sum += loss.item();
        }
        double val_acc = 0.0;
        if (!val_eps.empty()) {
            SourceModel probe = finish_meta_model(enc.clone(), norm, spec, "relationnet");
            probe.relation = RelationModule{rel.w1.clone(), rel.b1.clone(), rel.w2.clone(),
                                            rel.b2.clone()};
            EpisodeEvaluator eval(probe, data, HeadKind::relation, cfg);
            val_acc = meta_val_accuracy(eval, val_eps);
        }
        result.metrics.push_back({epoch, loss_sum / static_cast<double>(cfg.episodes_per_epoch),
                                  val_acc, opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(enc, rel_params);
        }
    }
    restore_snapshot(best, enc, rel_params);
    result.model = finish_meta_model(std::move(enc), norm, spec, "relationnet");
    result.model.relation = std::move(rel);
    return result;
}

TrainResult meta_train_maml(const Dataset& data, const SplitView& train_view,
                            const SplitView& val_view, const NormStats& norm,
                            const EncoderSpec& spec, const TrainConfig& cfg) {
    cfg.validate();
    EpisodeStreamConfig scfg{cfg.epochs, cfg.episodes_per_epoch, cfg.train_ways,
                             cfg.shots, cfg.queries, derive_seed(cfg.seed, 0x20)};
    EpisodeStream stream(train_view, scfg);
    Encoder enc(spec, derive_seed(cfg.seed, 0x01));
    LinearHead head = LinearHead::init(spec.latent_dim, cfg.train_ways,
                                       derive_seed(cfg.seed, 0x02));
    Optimizer opt(optim_config(cfg));
    auto val_eps = meta_val_episodes_for(val_view, cfg);

    std::vector<Tensor> head_params_v = head.params();
    std::vector<Tensor> leaves = enc.params();
    const std::size_t n_enc = leaves.size();
    leaves.insert(leaves.end(), head_params_v.begin(), head_params_v.end());

    auto apply_params = [&](const std::vector<Tensor>& ps) {
        std::vector<Tensor> enc_ps(ps.begin(), ps.begin() + static_cast<std::ptrdiff_t>(n_enc));
        enc.set_params(enc_ps);
        head.w = ps[n_enc];
        head.b = ps[n_enc + 1];
    };

    TrainResult result;
    double best_val = -1.0;
    Snapshot best;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        double loss_sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t m = 0; m < cfg.episodes_per_epoch; ++m) {
            Episode ep = stream.at(epoch, m);
            try {
                Tape tape;
                // inner loop: SGD on the support loss, kept on-tape
                std::vector<Tensor> cur = leaves;
                for (std::size_t k = 0; k < cfg.inner_steps; ++k) {
                    apply_params(cur);
                    Tensor z_s = enc.forward(to_batch(data, ep.support_idx), true);
                    Tensor inner_loss = cross_entropy(linear(z_s, head.w, head.b),
                                                      ep.support_local);
                    auto gs = backward(inner_loss, cur, /*create_graph=*/true);
                    for (std::size_t i = 0; i < cur.size(); ++i) {
                        cur[i] = sub(cur[i], scalar_scale(gs[i], cfg.inner_lr));
                    }
                }
                // outer loss at the adapted parameters, gradient wrt the
                // initialization (flows through the inner updates)
                apply_params(cur);
                Tensor z_q = enc.forward(to_batch(data, ep.query_idx), true);
                Tensor outer = cross_entropy(linear(z_q, head.w, head.b), ep.query_local);
                auto outer_grads = backward(outer, leaves);
                apply_params(leaves);
                opt.step(leaves, outer_grads);
                loss_sum += outer.item();
                counted++;
            } catch (const NumericError&) {
                apply_params(leaves);  // inner divergence: skip the episode
                result.skipped_episodes++;
            }
        }
        double val_acc = 0.0;
        if (!val_eps.empty()) {
            SourceModel probe = finish_meta_model(enc.clone(), norm, spec, "maml");
            EpisodeEvaluator eval(probe, data, HeadKind::maml, cfg);
            val_acc = meta_val_accuracy(eval, val_eps);
        }
        result.metrics.push_back(
            {epoch, counted > 0 ? loss_sum / static_cast<double>(counted) : 0.0, val_acc,
             opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(enc, head_params_v);
        }
    }
    restore_snapshot(best, enc, head_params_v);
    result.model = finish_meta_model(std::move(enc), norm, spec, "maml");
    return result;
}

// ---------------------------------------------------------------------------
// Self-distillation
// ---------------------------------------------------------------------------

TrainResult distill(const SourceModel& teacher, const Dataset& data, const MonolithicSplit& split,
                    const TrainConfig& cfg) {
    cfg.validate();
    if (!teacher.linear_head.has_value()) {
        throw ConfigError("distill: teacher must carry a linear head");
    }
    const std::vector<int>& classes = teacher.trained_classes;
    const std::size_t C = classes.size();
    const double T = cfg.distill_temperature;
    const double alpha = cfg.distill_alpha;

    // teacher is frozen: cache its logits once
    Encoder teacher_enc = teacher.encoder.clone();
    Tensor t_logits_cache;
    {
        NoGradGuard ng;
        t_logits_cache = teacher.linear_head->logits(embed_eval(teacher_enc, data, split.fit_idx));
    }
    std::map<std::size_t, std::size_t> row_of;  // dataset index -> cached row
    for (std::size_t r = 0; r < split.fit_idx.size(); ++r) row_of[split.fit_idx[r]] = r;

    Encoder student(teacher.spec, derive_seed(cfg.seed, 0x04));
    LinearHead head = LinearHead::init(teacher.spec.latent_dim, C, derive_seed(cfg.seed, 0x05));
    std::vector<Tensor> head_params_v = head.params();
    std::vector<Tensor> params = student.params();
    params.insert(params.end(), head_params_v.begin(), head_params_v.end());
    Optimizer opt(optim_config(cfg));

    auto head_fn = [&head](const Tensor& z) { return head.logits(z); };
    TrainResult result;
    double best_val = -1.0;
    Snapshot best;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        auto order = shuffled(split.fit_idx, make_rng(cfg.seed, 0x11, epoch));
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<std::size_t> batch(order.begin() + off,
                                           order.begin() + std::min(order.size(),
                                                                    off + cfg.batch_size));
            std::vector<std::size_t> rows;
            rows.reserve(batch.size());
            for (std::size_t i : batch) rows.push_back(row_of.at(i));

            Tape tape;
            Tensor z = student.forward(to_batch(data, batch), true);
            Tensor logits = head.logits(z);
            Tensor loss = distill_loss(gather_rows(t_logits_cache, rows), logits,
                                       local_labels(data, batch, classes), alpha, T);
            auto grads = backward(loss, params);
            opt.step(params, grads);
            loss_sum += loss.item() * static_cast<double>(batch.size());
            seen += batch.size();
        }
        double val_acc =
            classifier_balanced_accuracy(student, head_fn, data, split.val_idx, classes);
        result.metrics.push_back(
            {epoch, loss_sum / static_cast<double>(seen), val_acc, opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(student, head_params_v);
        }
    }
    restore_snapshot(best, student, head_params_v);

    SourceModel model;
    model.spec = teacher.spec;
    model.encoder = std::move(student);
    model.norm = teacher.norm;
    model.method = "rfs_distill";
    model.trained_classes = classes;
    model.linear_head = std::move(head);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Contrastive pre-training
// ---------------------------------------------------------------------------

namespace {

// nearest-class-prototype validation accuracy used for contrastive
// checkpoint selection
double prototype_val_accuracy(Encoder& enc, const Dataset& data,
                              const std::vector<std::size_t>& fit_idx,
                              const std::vector<std::size_t>& val_idx,
                              const std::vector<int>& classes) {
    if (val_idx.empty()) return 0.0;
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i : fit_idx) by_class[data.samples[i].label].push_back(i);
    std::vector<std::size_t> anchor_idx;
    std::vector<int> anchor_local;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const auto& pool = by_class.at(classes[c]);
        for (std::size_t i = 0; i < std::min<std::size_t>(64, pool.size()); ++i) {
            anchor_idx.push_back(pool[i]);
            anchor_local.push_back(static_cast<int>(c));
        }
    }
    Tensor z_anchor = embed_eval(enc, data, anchor_idx);
    Tensor protos = prototypes(z_anchor, anchor_local, classes.size());
    Tensor z_val = embed_eval(enc, data, val_idx);
    std::vector<int> pred = argmax_rows(proto_logits(protos, z_val));
    std::vector<int> truth = local_labels(data, val_idx, classes);
    ConfusionMatrix cm(classes.size());
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(truth[i], pred[i]);
    return balanced_accuracy(cm);
}

}  // namespace

TrainResult train_contrastive(const Dataset& data, const MonolithicSplit& split,
                              const NormStats& norm, const EncoderSpec& spec,
                              const ContrastiveOptions& opts, const TrainConfig& cfg) {
    cfg.validate();
    std::vector<std::size_t> all_idx = split.fit_idx;
    all_idx.insert(all_idx.end(), split.val_idx.begin(), split.val_idx.end());
    const std::vector<int> classes = sorted_classes_of(data, all_idx);
    const std::size_t P = data.profile.packets, F = data.profile.features;

    Encoder enc(spec, derive_seed(cfg.seed, 0x01));
    ProjectionHead proj = ProjectionHead::init(spec.latent_dim, spec.latent_dim, 128,
                                               derive_seed(cfg.seed, 0x06));
    CosineHead emb;
    std::vector<Tensor> extra = proj.params();
    if (opts.class_embedding) {
        emb = CosineHead::init(spec.latent_dim, classes.size(), derive_seed(cfg.seed, 0x07));
        extra.push_back(emb.w);
    }
    std::vector<Tensor> params = enc.params();
    params.insert(params.end(), extra.begin(), extra.end());
    Optimizer opt(optim_config(cfg));

    TrainResult result;
    double best_val = -1.0;
    Snapshot best;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        auto order = shuffled(split.fit_idx, make_rng(cfg.seed, 0x12, epoch));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<std::size_t> batch(order.begin() + off,
                                           order.begin() + std::min(order.size(),
                                                                    off + cfg.batch_size));
            if (batch.size() < 2) continue;  // a lone sample has no negatives
            Rng view_rng = make_rng(cfg.seed, 0x13 + epoch, off);
            std::vector<std::vector<double>> views;
            std::vector<int> pair(2 * batch.size());
            std::vector<int> labels(2 * batch.size());
            std::vector<int> batch_local = local_labels(data, batch, classes);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const auto& feats = data.samples[batch[i]].features;
                views.push_back(random_view(feats, P, F, cfg.augment, view_rng));
                views.push_back(random_view(feats, P, F, cfg.augment, view_rng));
                pair[2 * i] = static_cast<int>(2 * i + 1);
                pair[2 * i + 1] = static_cast<int>(2 * i);
                labels[2 * i] = batch_local[i];
                labels[2 * i + 1] = batch_local[i];
            }

            Tape tape;
            Tensor z = enc.forward(rows_to_batch(views, P, F), true);
            Tensor projected = proj.project(z);
            Tensor loss = opts.supervised ? supcon_loss(projected, labels, cfg.temperature)
                                          : simclr_loss(projected, pair, cfg.temperature);
            if (opts.class_embedding) {
                Tensor aux = cross_entropy(emb.logits(z), labels);
                loss = add(loss, scalar_scale(aux, cfg.class_emb_weight));
            }
            auto grads = backward(loss, params);
            opt.step(params, grads);
            loss_sum += loss.item();
            batches++;
        }
        double val_acc = prototype_val_accuracy(enc, data, split.fit_idx, split.val_idx, classes);
        result.metrics.push_back({epoch, batches > 0 ? loss_sum / batches : 0.0, val_acc,
                                  opt.learning_rate()});
        if (!cfg.best_val_selection || val_acc > best_val) {
            best_val = val_acc;
            best = take_snapshot(enc, extra);
        }
    }
    restore_snapshot(best, enc, extra);

    SourceModel model;
    model.spec = spec;
    model.encoder = std::move(enc);
    model.norm = norm;
    model.method = std::string(opts.supervised ? "supcon" : "simclr") +
                   (opts.class_embedding ? "_classemb" : "");
    model.trained_classes = classes;
    if (opts.class_embedding) model.class_emb = std::move(emb);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Episode evaluation
// ---------------------------------------------------------------------------

EpisodeEvaluator::EpisodeEvaluator(const SourceModel& source, const Dataset& data, HeadKind head,
                                   const TrainConfig& cfg)
    : data_(&data),
      trunk_(source.encoder.clone()),
      head_(head),
      cfg_(cfg),
      latent_dim_(source.spec.latent_dim) {
    if (head == HeadKind::relation) {
        if (!source.relation.has_value()) {
            throw ConfigError("relation head evaluation needs a relation-trained source model");
        }
        relation_ = RelationModule{source.relation->w1.clone(), source.relation->b1.clone(),
                                   source.relation->w2.clone(), source.relation->b2.clone()};
    }
}

Tensor EpisodeEvaluator::embed(const std::vector<std::size_t>& idx, bool training) {
    return training ? trunk_.forward(to_batch(*data_, idx), true)
                    : embed_eval(trunk_, *data_, idx);
}

double EpisodeEvaluator::evaluate(const Episode& ep, ConfusionMatrix* cm_out) {
    if (head_ == HeadKind::maml) return evaluate_maml(ep, cm_out);

    Tensor z_s = embed(ep.support_idx, false).detach();
    Tensor z_q = embed(ep.query_idx, false).detach();
    const std::size_t N = ep.ways;
    std::vector<int> pred;

    switch (head_) {
        case HeadKind::nearest_neighbor:
            pred = nn_predict_batch(z_s, ep.support_local, z_q);
            break;
        case HeadKind::prototype: {
            NoGradGuard ng;
            pred = argmax_rows(proto_logits(prototypes(z_s, ep.support_local, N), z_q));
            break;
        }
        case HeadKind::relation: {
            NoGradGuard ng;
            Tensor means = prototypes(z_s, ep.support_local, N);
            pred = argmax_rows(relation_->scores(means, z_q));
            break;
        }
        case HeadKind::logistic: {
            LogisticHead lh = LogisticHead::fit(z_s, ep.support_local, N);
            NoGradGuard ng;
            pred = argmax_rows(lh.probs(z_q));
            break;
        }
        case HeadKind::linear:
        case HeadKind::class_embedding: {
            // gradient head: fixed budget of full-batch steps on the support
            LinearHead lin;
            CosineHead cos;
            std::vector<Tensor> hp;
            std::function<Tensor(const Tensor&)> logits_fn;
            const std::uint64_t hseed = derive_seed(cfg_.seed, 0x70, ep.id);
            if (head_ == HeadKind::linear) {
                lin = LinearHead::init(latent_dim_, N, hseed);
                hp = lin.params();
                logits_fn = [&lin](const Tensor& z) { return lin.logits(z); };
            } else {
                cos = CosineHead::init(latent_dim_, N, hseed);
                hp = cos.params();
                logits_fn = [&cos](const Tensor& z) { return cos.logits(z); };
            }
            OptimConfig oc;
            oc.kind = OptimKind::adam;
            oc.learning_rate = cfg_.finetune_lr;
            Optimizer opt(oc);
            for (std::size_t step = 0; step < cfg_.finetune_steps; ++step) {
                Tape tape;
                Tensor loss = cross_entropy(logits_fn(z_s), ep.support_local);
                auto grads = backward(loss, hp);
                opt.step(hp, grads);
            }
            NoGradGuard ng;
            pred = argmax_rows(logits_fn(z_q));
            break;
        }
        default:
            throw ContractError("unsupported head kind in episode evaluation");
    }

    ConfusionMatrix cm(N);
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(ep.query_local[i], pred[i]);
    if (cm_out != nullptr) *cm_out = cm;
    return balanced_accuracy(cm);
}

double EpisodeEvaluator::evaluate_maml(const Episode& ep, ConfusionMatrix* cm_out) {
    // fresh N-way head per episode; the trunk copy adapts jointly with it
    Encoder trunk = trunk_.clone();
    LinearHead head = LinearHead::init(latent_dim_, ep.ways,
                                       derive_seed(cfg_.seed, 0x71, ep.id));
    std::vector<Tensor> params = trunk.params();
    auto hp = head.params();
    params.insert(params.end(), hp.begin(), hp.end());

    for (std::size_t k = 0; k < cfg_.inner_steps; ++k) {
        Tape tape;
        Tensor z_s = trunk.forward(to_batch(*data_, ep.support_idx), true);
        Tensor loss = cross_entropy(head.logits(z_s), ep.support_local);
        auto grads = backward(loss, params);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& w = params[i].mutable_values();
            const auto& g = grads[i].values();
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg_.inner_lr * g[j];
        }
    }
    NoGradGuard ng;
    Tensor z_q = trunk.forward(to_batch(*data_, ep.query_idx), true);
    std::vector<int> pred = argmax_rows(head.logits(z_q));
    ConfusionMatrix cm(ep.ways);
    for (std::size_t i = 0; i < pred.size(); ++i) cm.add(ep.query_local[i], pred[i]);
    if (cm_out != nullptr) *cm_out = cm;
    return balanced_accuracy(cm);
}

double finetune_episode(const SourceModel& source, const Dataset& data, const Episode& ep,
                        HeadKind head, const TrainConfig& cfg, ConfusionMatrix* cm_out) {
    EpisodeEvaluator eval(source, data, head, cfg);
    return eval.evaluate(ep, cm_out);
}

// ---------------------------------------------------------------------------
// Plain transfer
// ---------------------------------------------------------------------------

double transfer_plain(const SourceModel& source, const Dataset& data,
                      const std::vector<std::size_t>& fit_idx,
                      const std::vector<std::size_t>& val_idx,
                      const std::vector<std::size_t>& test_idx, HeadKind head,
                      const TrainConfig& cfg) {
    cfg.validate();
    if (head != HeadKind::linear && head != HeadKind::class_embedding) {
        throw ConfigError("transfer_plain uses a linear or class_embedding head");
    }
    std::vector<std::size_t> all_idx = fit_idx;
    all_idx.insert(all_idx.end(), val_idx.begin(), val_idx.end());
    all_idx.insert(all_idx.end(), test_idx.begin(), test_idx.end());
    const std::vector<int> classes = sorted_classes_of(data, all_idx);
    const std::size_t C = classes.size();

    // frozen trunk: cache embeddings once
    Encoder trunk = source.encoder.clone();
    Tensor z_fit = embed_eval(trunk, data, fit_idx);
    Tensor z_val = val_idx.empty() ? Tensor() : embed_eval(trunk, data, val_idx);
    Tensor z_test = embed_eval(trunk, data, test_idx);
    std::vector<int> y_fit = local_labels(data, fit_idx, classes);
    std::vector<int> y_val = val_idx.empty() ? std::vector<int>{}
                                             : local_labels(data, val_idx, classes);
    std::vector<int> y_test = local_labels(data, test_idx, classes);

    LinearHead lin;
    CosineHead cos;
    std::vector<Tensor> hp;
    std::function<Tensor(const Tensor&)> logits_fn;
    if (head == HeadKind::linear) {
        lin = LinearHead::init(source.spec.latent_dim, C, derive_seed(cfg.seed, 0x08));
        hp = lin.params();
        logits_fn = [&lin](const Tensor& z) { return lin.logits(z); };
    } else {
        cos = CosineHead::init(source.spec.latent_dim, C, derive_seed(cfg.seed, 0x08));
        hp = cos.params();
        logits_fn = [&cos](const Tensor& z) { return cos.logits(z); };
    }
    Optimizer opt(optim_config(cfg));

    auto eval_on = [&](const Tensor& z, const std::vector<int>& y) {
        NoGradGuard ng;
        std::vector<int> pred = argmax_rows(logits_fn(z));
        ConfusionMatrix cm(C);
        for (std::size_t i = 0; i < y.size(); ++i) cm.add(y[i], pred[i]);
        return balanced_accuracy(cm);
    };

    std::vector<std::size_t> rows(fit_idx.size());
    std::iota(rows.begin(), rows.end(), 0);
    double best_val = -1.0;
    std::vector<std::vector<double>> best_hp;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_epoch(epoch);
        auto order = shuffled(rows, make_rng(cfg.seed, 0x14, epoch));
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<std::size_t> batch(order.begin() + off,
                                           order.begin() + std::min(order.size(),
                                                                    off + cfg.batch_size));
            std::vector<int> yb;
            yb.reserve(batch.size());
            for (std::size_t r : batch) yb.push_back(y_fit[r]);
            Tape tape;
            Tensor loss = cross_entropy(logits_fn(gather_rows(z_fit, batch)), yb);
            auto grads = backward(loss, hp);
            opt.step(hp, grads);
        }
        if (!val_idx.empty() && cfg.best_val_selection) {
            double va = eval_on(z_val, y_val);
            if (va > best_val) {
                best_val = va;
                best_hp.clear();
                for (const Tensor& p : hp) best_hp.push_back(p.values());
            }
        }
    }
    if (!best_hp.empty()) {
        for (std::size_t i = 0; i < hp.size(); ++i) hp[i].mutable_values() = best_hp[i];
    }
    return eval_on(z_test, y_test);
}

}  // namespace fewflow
