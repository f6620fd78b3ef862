#pragma once

// CNN encoders (conv + batch norm + relu blocks, final FC to the latent
// space) and the classification/projection heads used by the method zoo,
// plus the model checkpoint container.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fewflow/dataio.hpp"
#include "fewflow/optim.hpp"
#include "fewflow/tensor.hpp"

namespace fewflow {

enum class EncoderVariant { cnn2, cnn4 };

struct EncoderSpec {
    EncoderVariant variant = EncoderVariant::cnn2;
    std::size_t packets = 10;
    std::size_t features = 4;
    std::vector<std::size_t> filters = {32, 64};
    std::size_t latent_dim = 200;
    // kernel spans (packets x features); stride 1 with shape-preserving
    // zero padding, no pooling (inputs are tiny)
    std::size_t kernel_h = 3;
    std::size_t kernel_w = 2;

    static EncoderSpec cnn2(std::size_t packets, std::size_t features);
    static EncoderSpec cnn4(std::size_t packets, std::size_t features);
    std::string variant_name() const;
};

// d*c weights + c biases of a linear head
std::size_t head_params(std::size_t d, std::size_t c);

class Encoder {
public:
    Encoder() = default;
    Encoder(const EncoderSpec& spec, std::uint64_t seed);

    // x [B,1,P,F] -> [B,d]
    Tensor forward(const Tensor& x, bool training);

    const EncoderSpec& spec() const { return spec_; }
    std::vector<Tensor> params() const;
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    // replaces parameter handles (MAML adapted forward); order as params()
    void set_params(const std::vector<Tensor>& ps);
    std::size_t param_count() const;
    Encoder clone() const;

    struct Block {
        Tensor w, b, gamma, beta;
        BatchNormState bn;
    };
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }

private:
    EncoderSpec spec_;
    std::vector<Block> blocks_;
    Tensor fc_w, fc_b;
};

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

struct LinearHead {
    Tensor w;  // [d,c]
    Tensor b;  // [c]
    static LinearHead init(std::size_t d, std::size_t c, std::uint64_t seed);
    Tensor logits(const Tensor& z) const;  // [B,c]
    std::vector<Tensor> params() const { return {w, b}; }
};

// class-embedding head: scaled cosine between z and the columns of w
struct CosineHead {
    Tensor w;  // [d,c]; column i embeds class i
    double scale = 10.0;
    static CosineHead init(std::size_t d, std::size_t c, std::uint64_t seed);
    Tensor logits(const Tensor& z) const;
    std::vector<Tensor> params() const { return {w}; }
};

// one-vs-rest logistic regression on L2-normalized embeddings, fit by
// full-batch gradient descent
struct LogisticHead {
    Tensor w;  // [d,c]
    Tensor b;  // [c]
    static LogisticHead fit(const Tensor& z, const std::vector<int>& labels, std::size_t classes,
                            std::size_t max_iters = 1000, double grad_tol = 1e-6,
                            double lr = 1.0);
    Tensor probs(const Tensor& z) const;  // per-class sigmoid scores
};

// 1-NN on L2-normalized embeddings; ties broken by lowest label id
int nn_predict(const Tensor& support, const std::vector<int>& support_labels,
               const Tensor& query_row);
std::vector<int> nn_predict_batch(const Tensor& support, const std::vector<int>& support_labels,
                                  const Tensor& queries);

// class -> mean support embedding, ordered by local label 0..N-1
Tensor prototypes(const Tensor& support, const std::vector<int>& support_labels,
                  std::size_t ways);  // [N,d]
Tensor proto_logits(const Tensor& protos, const Tensor& queries);  // -squared distance, [M,N]

struct RelationModule {
    Tensor w1, b1;  // [2d,h], [h]
    Tensor w2, b2;  // [h,1], [1]
    static RelationModule init(std::size_t d, std::size_t hidden, std::uint64_t seed);
    // support class means [N,d] x queries [M,d] -> scores [M,N] in [0,1]
    Tensor scores(const Tensor& class_means, const Tensor& queries) const;
    std::vector<Tensor> params() const { return {w1, b1, w2, b2}; }
};

struct ProjectionHead {
    Tensor w1, b1;  // [d,h]
    Tensor w2, b2;  // [h,out]
    static ProjectionHead init(std::size_t d, std::size_t hidden, std::size_t out,
                               std::uint64_t seed);
    Tensor project(const Tensor& z) const;  // unit rows
    std::vector<Tensor> params() const { return {w1, b1, w2, b2}; }
};

// ---------------------------------------------------------------------------
// Source model + checkpoint container
// ---------------------------------------------------------------------------

struct SourceModel {
    EncoderSpec spec;
    Encoder encoder;
    NormStats norm;
    std::string method;       // training provenance
    std::string config_hash;  // hex digest of the resolved config
    // classes the source task was trained on (dense ids, head-column order)
    std::vector<int> trained_classes;
    std::optional<LinearHead> linear_head;
    std::optional<CosineHead> class_emb;
    std::optional<RelationModule> relation;
    std::map<std::int64_t, int> class_id_map;
};

void save_checkpoint(const SourceModel& m, const std::string& path);
SourceModel load_checkpoint(const std::string& path);

// [B,1,P,F] batch from (already normalized) samples
Tensor to_batch(const Dataset& d, const std::vector<std::size_t>& idx);
Tensor rows_to_batch(const std::vector<std::vector<double>>& rows, std::size_t packets,
                     std::size_t features);

// He-style fan-in-scaled uniform init
Tensor he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed);

}  // namespace fewflow
