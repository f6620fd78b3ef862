#include "fewflow/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "fewflow/rng.hpp"
#include "json.hpp"

namespace fewflow {

namespace {

using json = nlohmann::ordered_json;

Conv2dGeom same_pad_geom(const EncoderSpec& spec) {
    Conv2dGeom g;
    g.kh = spec.kernel_h;
    g.kw = spec.kernel_w;
    g.sh = 1;
    g.sw = 1;
    g.pad_top = (spec.kernel_h - 1) / 2;
    g.pad_bottom = spec.kernel_h - 1 - g.pad_top;
    g.pad_left = (spec.kernel_w - 1) / 2;
    g.pad_right = spec.kernel_w - 1 - g.pad_left;
    return g;
}

}  // namespace

EncoderSpec EncoderSpec::cnn2(std::size_t packets, std::size_t features) {
    EncoderSpec s;
    s.variant = EncoderVariant::cnn2;
    s.packets = packets;
    s.features = features;
    s.filters = {32, 64};
    s.latent_dim = 200;
    return s;
}

EncoderSpec EncoderSpec::cnn4(std::size_t packets, std::size_t features) {
    EncoderSpec s;
    s.variant = EncoderVariant::cnn4;
    s.packets = packets;
    s.features = features;
    s.filters = {32, 64, 64, 64};
    s.latent_dim = 500;
    return s;
}

std::string EncoderSpec::variant_name() const {
    return variant == EncoderVariant::cnn2 ? "cnn2" : "cnn4";
}

std::size_t head_params(std::size_t d, std::size_t c) { return d * c + c; }

Tensor he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> vals(shape_numel(shape));
    for (auto& v : vals) v = u(rng);
    return Tensor(std::move(shape), std::move(vals), /*requires_grad=*/true);
}

Encoder::Encoder(const EncoderSpec& spec, std::uint64_t seed) : spec_(spec) {
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < spec.filters.size(); ++i) {
        Block blk;
        const std::size_t out_ch = spec.filters[i];
        const std::size_t fan_in = in_ch * spec.kernel_h * spec.kernel_w;
        blk.w = he_uniform({out_ch, in_ch, spec.kernel_h, spec.kernel_w}, fan_in,
                           derive_seed(seed, 0x10 + i, 0));
        blk.b = Tensor::zeros({out_ch}, true);
        blk.gamma = Tensor::full({out_ch}, 1.0, true);
        blk.beta = Tensor::zeros({out_ch}, true);
        blocks_.push_back(std::move(blk));
        in_ch = out_ch;
    }
    const std::size_t flat = in_ch * spec.packets * spec.features;
    fc_w = he_uniform({flat, spec.latent_dim}, flat, derive_seed(seed, 0x20, 0));
    fc_b = Tensor::zeros({spec.latent_dim}, true);
}

Tensor Encoder::forward(const Tensor& x, bool training) {
    if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != spec_.packets ||
        x.dim(3) != spec_.features) {
        throw ContractError("encoder input must be [B,1," + std::to_string(spec_.packets) + "," +
                            std::to_string(spec_.features) + "], got " + shape_str(x.shape()));
    }
    Conv2dGeom g = same_pad_geom(spec_);
    Tensor h = x;
    for (auto& blk : blocks_) {
        h = conv2d(h, blk.w, blk.b, g);
        h = batch_norm(h, blk.gamma, blk.beta, blk.bn, training);
        h = relu(h);
    }
    const std::size_t B = x.dim(0);
    h = reshape(h, {B, h.numel() / B});
    return linear(h, fc_w, fc_b);
}

std::vector<Tensor> Encoder::params() const {
    std::vector<Tensor> ps;
    for (const auto& blk : blocks_) {
        ps.push_back(blk.w);
        ps.push_back(blk.b);
        ps.push_back(blk.gamma);
        ps.push_back(blk.beta);
    }
    ps.push_back(fc_w);
    ps.push_back(fc_b);
    return ps;
}

std::vector<std::pair<std::string, Tensor>> Encoder::named_params() const {
    std::vector<std::pair<std::string, Tensor>> ps;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        ps.emplace_back(p + "w", blocks_[i].w);
        ps.emplace_back(p + "b", blocks_[i].b);
        ps.emplace_back(p + "gamma", blocks_[i].gamma);
        ps.emplace_back(p + "beta", blocks_[i].beta);
    }
    ps.emplace_back("fc.w", fc_w);
    ps.emplace_back("fc.b", fc_b);
    return ps;
}

void Encoder::set_params(const std::vector<Tensor>& ps) {
    if (ps.size() != blocks_.size() * 4 + 2) {
        throw ContractError("encoder set_params: wrong parameter count");
    }
    std::size_t i = 0;
    for (auto& blk : blocks_) {
        blk.w = ps[i++];
        blk.b = ps[i++];
        blk.gamma = ps[i++];
        blk.beta = ps[i++];
    }
    fc_w = ps[i++];
    fc_b = ps[i++];
}

std::size_t Encoder::param_count() const {
    std::size_t n = 0;
    for (const Tensor& p : params()) n += p.numel();
    return n;
}

Encoder Encoder::clone() const {
    Encoder c;
    c.spec_ = spec_;
    for (const auto& blk : blocks_) {
        Block nb;
        nb.w = blk.w.clone();
        nb.b = blk.b.clone();
        nb.gamma = blk.gamma.clone();
        nb.beta = blk.beta.clone();
        nb.bn = blk.bn;
        c.blocks_.push_back(std::move(nb));
    }
    c.fc_w = fc_w.clone();
    c.fc_b = fc_b.clone();
    return c;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

LinearHead LinearHead::init(std::size_t d, std::size_t c, std::uint64_t seed) {
    LinearHead h;
    h.w = he_uniform({d, c}, d, derive_seed(seed, 0x31, 0));
    h.b = Tensor::zeros({c}, true);
    return h;
}

Tensor LinearHead::logits(const Tensor& z) const { return linear(z, w, b); }

CosineHead CosineHead::init(std::size_t d, std::size_t c, std::uint64_t seed) {
    CosineHead h;
    h.w = he_uniform({d, c}, d, derive_seed(seed, 0x32, 0));
    return h;
}

Tensor CosineHead::logits(const Tensor& z) const {
    // cosine between z rows and w columns, sharpened for cross-entropy
    return scalar_scale(cosine_similarity(z, transpose(w)), scale);
}

LogisticHead LogisticHead::fit(const Tensor& z, const std::vector<int>& labels,
                               std::size_t classes, std::size_t max_iters, double grad_tol,
                               double lr) {
    if (z.ndim() != 2 || z.dim(0) != labels.size()) {
        throw ContractError("logistic fit: embedding/label mismatch");
    }
    const std::size_t d = z.dim(1);
    Tensor zn = l2_normalize(z).detach();
    Tensor targets = one_hot(labels, classes);

    LogisticHead h;
    h.w = Tensor::zeros({d, classes}, true);
    h.b = Tensor::zeros({classes}, true);

    for (std::size_t it = 0; it < max_iters; ++it) {
        Tape tape;
        Tensor p = sigmoid(linear(zn, h.w, h.b));
        // mean binary cross-entropy, one-vs-rest over all classes
        Tensor bce =
            neg(add(mul(targets, log_t(add_scalar(p, 1e-12))),
                    mul(add_scalar(neg(targets), 1.0), log_t(add_scalar(neg(p), 1.0 + 1e-12)))));
        Tensor loss = mean(bce);
        auto grads = backward(loss, {h.w, h.b});
        double gnorm2 = 0;
        for (const auto& g : grads) {
            for (double v : g.values()) gnorm2 += v * v;
        }
        if (std::sqrt(gnorm2) < grad_tol) break;
        auto& wv = h.w.mutable_values();
        auto& bv = h.b.mutable_values();
        for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= lr * grads[0].values()[i];
        for (std::size_t i = 0; i < bv.size(); ++i) bv[i] -= lr * grads[1].values()[i];
    }
    return h;
}

Tensor LogisticHead::probs(const Tensor& z) const {
    return sigmoid(linear(l2_normalize(z), w, b));
}

int nn_predict(const Tensor& support, const std::vector<int>& support_labels,
               const Tensor& query_row) {
    Tensor q = query_row.ndim() == 1 ? reshape(query_row, {1, query_row.numel()}) : query_row;
    return nn_predict_batch(support, support_labels, q)[0];
}

std::vector<int> nn_predict_batch(const Tensor& support, const std::vector<int>& support_labels,
                                  const Tensor& queries) {
    if (support.dim(0) == 0 || support.dim(0) != support_labels.size()) {
        throw ContractError("nn_predict: bad support set");
    }
    NoGradGuard ng;
    Tensor sn = l2_normalize(support);
    Tensor qn = l2_normalize(queries);
    Tensor d2 = euclidean_sq_dist(qn, sn);  // [M,S]
    const std::size_t M = d2.dim(0), S = d2.dim(1);
    std::vector<int> out(M);
    for (std::size_t i = 0; i < M; ++i) {
        double best = d2.values()[i * S];
        int best_label = support_labels[0];
        for (std::size_t j = 1; j < S; ++j) {
            double dj = d2.values()[i * S + j];
            if (dj < best || (dj == best && support_labels[j] < best_label)) {
                best = dj;
                best_label = support_labels[j];
            }
        }
        out[i] = best_label;
    }
    return out;
}

Tensor prototypes(const Tensor& support, const std::vector<int>& support_labels,
                  std::size_t ways) {
    if (support.ndim() != 2 || support.dim(0) != support_labels.size()) {
        throw ContractError("prototypes: embedding/label mismatch");
    }
    // averaging matrix [N,S]: row k holds 1/|class k| at class-k columns
    std::vector<double> avg(ways * support.dim(0), 0.0);
    std::vector<std::size_t> counts(ways, 0);
    for (int l : support_labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= ways) {
            throw ContractError("prototypes: local label out of range");
        }
        counts[static_cast<std::size_t>(l)]++;
    }
    for (std::size_t k = 0; k < ways; ++k) {
        if (counts[k] == 0) {
            throw ContractError("prototypes: way " + std::to_string(k) + " has no supports");
        }
    }
    for (std::size_t j = 0; j < support_labels.size(); ++j) {
        std::size_t k = static_cast<std::size_t>(support_labels[j]);
        avg[k * support.dim(0) + j] = 1.0 / static_cast<double>(counts[k]);
    }
    Tensor a({ways, support.dim(0)}, std::move(avg));
    return matmul(a, support);  // [N,d]
}

Tensor proto_logits(const Tensor& protos, const Tensor& queries) {
    return neg(euclidean_sq_dist(queries, protos));
}

RelationModule RelationModule::init(std::size_t d, std::size_t hidden, std::uint64_t seed) {
    RelationModule m;
    m.w1 = he_uniform({2 * d, hidden}, 2 * d, derive_seed(seed, 0x41, 0));
    m.b1 = Tensor::zeros({hidden}, true);
    m.w2 = he_uniform({hidden, 1}, hidden, derive_seed(seed, 0x42, 0));
    m.b2 = Tensor::zeros({1}, true);
    return m;
}

Tensor RelationModule::scores(const Tensor& class_means, const Tensor& queries) const {
    const std::size_t N = class_means.dim(0), M = queries.dim(0), d = class_means.dim(1);
    if (queries.dim(1) != d) throw ContractError("relation scores: dim mismatch");
    // rows ordered query-major ((q0,c0), (q0,c1), ...) so the result reshapes
    // to [M,N]; tiling goes through constant selection matrices so gradients
    // reach class_means and queries
    std::vector<double> sel_q(M * N * M, 0.0), sel_c(M * N * N, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < N; ++k) {
            sel_q[(i * N + k) * M + i] = 1.0;
            sel_c[(i * N + k) * N + k] = 1.0;
        }
    }
    Tensor tiled_q = matmul(Tensor({M * N, M}, std::move(sel_q)), queries);
    Tensor tiled_c = matmul(Tensor({M * N, N}, std::move(sel_c)), class_means);
    Tensor pairs = concat({tiled_c, tiled_q}, 1);  // [M*N, 2d]
    Tensor h = relu(linear(pairs, w1, b1));
    Tensor s = sigmoid(linear(h, w2, b2));  // [M*N, 1]
    return reshape(s, {M, N});
}

ProjectionHead ProjectionHead::init(std::size_t d, std::size_t hidden, std::size_t out,
                                    std::uint64_t seed) {
    ProjectionHead p;
    p.w1 = he_uniform({d, hidden}, d, derive_seed(seed, 0x51, 0));
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = he_uniform({hidden, out}, hidden, derive_seed(seed, 0x52, 0));
    p.b2 = Tensor::zeros({out}, true);
    return p;
}

Tensor ProjectionHead::project(const Tensor& z) const {
    Tensor h = relu(linear(z, w1, b1));
    return l2_normalize(linear(h, w2, b2));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

json spec_to_json(const EncoderSpec& s) {
    json j;
    j["variant"] = s.variant_name();
    j["packets"] = s.packets;
    j["features"] = s.features;
    j["filters"] = s.filters;
    j["latent_dim"] = s.latent_dim;
    j["kernel_h"] = s.kernel_h;
    j["kernel_w"] = s.kernel_w;
    return j;
}

EncoderSpec spec_from_json(const json& j) {
    EncoderSpec s;
    s.variant = j.at("variant").get<std::string>() == "cnn4" ? EncoderVariant::cnn4
                                                             : EncoderVariant::cnn2;
    s.packets = j.at("packets").get<std::size_t>();
    s.features = j.at("features").get<std::size_t>();
    s.filters = j.at("filters").get<std::vector<std::size_t>>();
    s.latent_dim = j.at("latent_dim").get<std::size_t>();
    s.kernel_h = j.at("kernel_h").get<std::size_t>();
    s.kernel_w = j.at("kernel_w").get<std::size_t>();
    return s;
}

}  // namespace

void save_checkpoint(const SourceModel& m, const std::string& path) {
    // collect tensors: encoder params, bn buffers, optional class embedding
    std::vector<std::pair<std::string, std::vector<double>>> tensors;
    std::vector<std::pair<std::string, Shape>> shapes;
    for (const auto& [name, t] : m.encoder.named_params()) {
        tensors.emplace_back(name, t.values());
        shapes.emplace_back(name, t.shape());
    }
    for (std::size_t i = 0; i < m.encoder.blocks().size(); ++i) {
        const auto& bn = m.encoder.blocks()[i].bn;
        const std::string p = "block" + std::to_string(i) + ".bn.";
        tensors.emplace_back(p + "running_mean", bn.running_mean);
        shapes.emplace_back(p + "running_mean", Shape{bn.running_mean.size()});
        tensors.emplace_back(p + "running_var", bn.running_var);
        shapes.emplace_back(p + "running_var", Shape{bn.running_var.size()});
    }
    if (m.class_emb.has_value()) {
        tensors.emplace_back("class_emb.w", m.class_emb->w.values());
        shapes.emplace_back("class_emb.w", m.class_emb->w.shape());
    }
    if (m.linear_head.has_value()) {
        tensors.emplace_back("linear_head.w", m.linear_head->w.values());
        shapes.emplace_back("linear_head.w", m.linear_head->w.shape());
        tensors.emplace_back("linear_head.b", m.linear_head->b.values());
        shapes.emplace_back("linear_head.b", m.linear_head->b.shape());
    }
    if (m.relation.has_value()) {
        for (const auto& [suffix, t] :
             std::initializer_list<std::pair<const char*, const Tensor*>>{
                 {"w1", &m.relation->w1},
                 {"b1", &m.relation->b1},
                 {"w2", &m.relation->w2},
                 {"b2", &m.relation->b2}}) {
            tensors.emplace_back(std::string("relation.") + suffix, t->values());
            shapes.emplace_back(std::string("relation.") + suffix, t->shape());
        }
    }

    json meta;
    meta["spec"] = spec_to_json(m.spec);
    meta["method"] = m.method;
    meta["config_hash"] = m.config_hash;
    meta["trained_classes"] = m.trained_classes;
    meta["norm_mean"] = m.norm.mean;
    meta["norm_stddev"] = m.norm.stddev;
    json cmap = json::object();
    for (const auto& [orig, dense] : m.class_id_map) cmap[std::to_string(orig)] = dense;
    meta["class_id_map"] = cmap;
    json table = json::array();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        json row;
        row["name"] = tensors[i].first;
        row["shape"] = shapes[i].second;
        row["count"] = tensors[i].second.size();
        table.push_back(row);
    }
    meta["tensors"] = table;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open checkpoint '" + path + "' for writing");
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    const std::string meta_s = meta.dump();
    write_u64(out, meta_s.size());
    out.write(meta_s.data(), static_cast<std::streamsize>(meta_s.size()));
    for (const auto& [name, vals] : tensors) {
        out.write(reinterpret_cast<const char*>(vals.data()),
                  static_cast<std::streamsize>(vals.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

SourceModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    char magic[4];
    std::uint32_t version = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw DataError("'" + path + "' is not a checkpoint file");
    }
    if (version != kVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    std::uint64_t meta_len = 0;
    in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
    std::string meta_s(meta_len, '\0');
    in.read(meta_s.data(), static_cast<std::streamsize>(meta_len));
    json meta = json::parse(meta_s, nullptr, false);
    if (meta.is_discarded()) throw DataError("malformed checkpoint metadata in '" + path + "'");

    SourceModel m;
    m.spec = spec_from_json(meta.at("spec"));
    m.method = meta.at("method").get<std::string>();
    m.config_hash = meta.at("config_hash").get<std::string>();
    m.trained_classes = meta.at("trained_classes").get<std::vector<int>>();
    m.norm.mean = meta.at("norm_mean").get<std::vector<double>>();
    m.norm.stddev = meta.at("norm_stddev").get<std::vector<double>>();
    for (const auto& [k, v] : meta.at("class_id_map").items()) {
        m.class_id_map[std::stoll(k)] = v.get<int>();
    }

    std::map<std::string, std::vector<double>> loaded;
    for (const auto& row : meta.at("tensors")) {
        const std::string name = row.at("name").get<std::string>();
        const std::size_t count = row.at("count").get<std::size_t>();
        std::vector<double> vals(count);
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!in) throw DataError("truncated checkpoint '" + path + "'");
        loaded[name] = std::move(vals);
    }

    m.encoder = Encoder(m.spec, /*seed=*/0);
    auto named = m.encoder.named_params();  // handles share the encoder's storage
    for (auto& [name, t] : named) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw DataError("checkpoint missing tensor '" + name + "'");
        if (it->second.size() != t.numel()) {
            throw DataError("checkpoint tensor '" + name + "' has wrong size");
        }
        t.mutable_values() = it->second;
    }
    for (std::size_t i = 0; i < m.encoder.blocks().size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".bn.";
        auto& bn = m.encoder.blocks()[i].bn;
        bn.running_mean = loaded.at(p + "running_mean");
        bn.running_var = loaded.at(p + "running_var");
    }
    if (loaded.count("class_emb.w")) {
        const std::size_t d = m.spec.latent_dim;
        const std::size_t c = loaded.at("class_emb.w").size() / d;
        CosineHead head;
        head.w = Tensor({d, c}, loaded.at("class_emb.w"), true);
        m.class_emb = std::move(head);
    }
    if (loaded.count("linear_head.w")) {
        const std::size_t d = m.spec.latent_dim;
        const std::size_t c = loaded.at("linear_head.w").size() / d;
        LinearHead head;
        head.w = Tensor({d, c}, loaded.at("linear_head.w"), true);
        head.b = Tensor({c}, loaded.at("linear_head.b"), true);
        m.linear_head = std::move(head);
    }
    if (loaded.count("relation.w1")) {
        const std::size_t hidden = loaded.at("relation.b1").size();
        const std::size_t two_d = loaded.at("relation.w1").size() / hidden;
        RelationModule rel;
        rel.w1 = Tensor({two_d, hidden}, loaded.at("relation.w1"), true);
        rel.b1 = Tensor({hidden}, loaded.at("relation.b1"), true);
        rel.w2 = Tensor({hidden, 1}, loaded.at("relation.w2"), true);
        rel.b2 = Tensor({1}, loaded.at("relation.b2"), true);
        m.relation = std::move(rel);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Tensor to_batch(const Dataset& d, const std::vector<std::size_t>& idx) {
    const std::size_t P = d.profile.packets, F = d.profile.features;
    std::vector<double> vals;
    vals.reserve(idx.size() * P * F);
    for (std::size_t i : idx) {
        const auto& f = d.samples.at(i).features;
        vals.insert(vals.end(), f.begin(), f.end());
    }
    return Tensor({idx.size(), 1, P, F}, std::move(vals));
}

Tensor rows_to_batch(const std::vector<std::vector<double>>& rows, std::size_t packets,
                     std::size_t features) {
    std::vector<double> vals;
    vals.reserve(rows.size() * packets * features);
    for (const auto& r : rows) {
        if (r.size() != packets * features) throw ContractError("rows_to_batch: row size mismatch");
        vals.insert(vals.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), 1, packets, features}, std::move(vals));
}

}  // namespace fewflow
