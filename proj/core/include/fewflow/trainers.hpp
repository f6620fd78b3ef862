#pragma once

// Training and fine-tuning procedures: monolithic cross-entropy training,
// fixed-representation transfer (episodic and plain), ProtoNet / RelationNet
// / MAML meta-training, self-distillation, and SimCLR / SupCon contrastive
// pre-training. All trainers consume normalized datasets and are
// deterministic given their seed.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fewflow/augment.hpp"
#include "fewflow/dataio.hpp"
#include "fewflow/episodes.hpp"
#include "fewflow/metrics.hpp"
#include "fewflow/nets.hpp"
#include "fewflow/optim.hpp"

namespace fewflow {

enum class HeadKind {
    linear,
    class_embedding,
    logistic,
    nearest_neighbor,
    prototype,
    relation,
    maml,
};

std::string head_kind_name(HeadKind k);
HeadKind head_kind_from(const std::string& name);
// the fine-tuning head each training method is evaluated with
HeadKind default_head_for(const std::string& method);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    LrSchedule lr_schedule = LrSchedule::constant;
    std::size_t lr_halve_every = 10;
    OptimKind optimizer = OptimKind::adam;

    // episodic training
    std::size_t episodes_per_epoch = 100;
    std::size_t train_ways = 5;
    std::size_t shots = 5;
    std::size_t queries = 15;
    std::size_t val_ways = 4;
    std::size_t meta_val_episodes = 20;

    // maml
    std::size_t inner_steps = 5;
    double inner_lr = 0.01;

    // contrastive
    double temperature = 0.1;
    AugmentPolicy augment;
    double class_emb_weight = 1.0;

    // distillation
    double distill_alpha = 0.5;
    double distill_temperature = 4.0;

    // episode fine-tuning (gradient heads)
    std::size_t finetune_steps = 100;
    double finetune_lr = 0.01;

    bool best_val_selection = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochMetric {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;  // balanced accuracy
    double learning_rate = 0.0;
};

struct TrainResult {
    SourceModel model;
    std::vector<EpochMetric> metrics;
    std::size_t skipped_episodes = 0;  // maml inner divergences
};

// ---------------------------------------------------------------------------
// Contrastive losses
// ---------------------------------------------------------------------------

// z: [M,dim] projections (rows are L2-normalized internally); pair[i] is the
// index of i's positive view, or -1 for a negatives-only row. Mean over
// anchors with a positive.
Tensor simclr_loss(const Tensor& z, const std::vector<int>& pair, double temperature);

// positives of anchor i are all same-label rows j != i; anchors with no
// positive are skipped.
Tensor supcon_loss(const Tensor& z, const std::vector<int>& labels, double temperature);

// alpha * CE(labels, student) + (1-alpha) * T^2 * KL(soft teacher || soft
// student); teacher logits are treated as constants.
Tensor distill_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                    const std::vector<int>& labels, double alpha, double temperature);

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

// head: linear (Baseline/RFS source) or class_embedding (Baseline(ClassEmb))
TrainResult train_monolithic(const Dataset& data, const MonolithicSplit& split,
                             const NormStats& norm, const EncoderSpec& spec, HeadKind head,
                             const TrainConfig& cfg);

TrainResult meta_train_protonet(const Dataset& data, const SplitView& train_view,
                                const SplitView& val_view, const NormStats& norm,
                                const EncoderSpec& spec, const TrainConfig& cfg);
TrainResult meta_train_relationnet(const Dataset& data, const SplitView& train_view,
                                   const SplitView& val_view, const NormStats& norm,
                                   const EncoderSpec& spec, const TrainConfig& cfg);
TrainResult meta_train_maml(const Dataset& data, const SplitView& train_view,
                            const SplitView& val_view, const NormStats& norm,
                            const EncoderSpec& spec, const TrainConfig& cfg);

// 3-step RFS pipeline, middle step: teacher = source (frozen), student = same
// architecture re-initialized
TrainResult distill(const SourceModel& teacher, const Dataset& data, const MonolithicSplit& split,
                    const TrainConfig& cfg);

struct ContrastiveOptions {
    bool supervised = false;      // SupCon vs SimCLR
    bool class_embedding = false;  // auxiliary cosine-head CE term
};
TrainResult train_contrastive(const Dataset& data, const MonolithicSplit& split,
                              const NormStats& norm, const EncoderSpec& spec,
                              const ContrastiveOptions& opts, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Episode evaluation (fixed representation)
// ---------------------------------------------------------------------------

// Holds a private trunk copy so repeated episode evaluation never touches the
// published source model.
class EpisodeEvaluator {
public:
    EpisodeEvaluator(const SourceModel& source, const Dataset& data, HeadKind head,
                     const TrainConfig& cfg);

    // balanced accuracy on the episode's query set
    double evaluate(const Episode& ep, ConfusionMatrix* cm_out = nullptr);
    HeadKind head() const { return head_; }

private:
    const Dataset* data_;
    Encoder trunk_;
    std::optional<RelationModule> relation_;
    HeadKind head_;
    TrainConfig cfg_;
    std::size_t latent_dim_;

    Tensor embed(const std::vector<std::size_t>& idx, bool training);
    double evaluate_maml(const Episode& ep, ConfusionMatrix* cm_out);
};

double finetune_episode(const SourceModel& source, const Dataset& data, const Episode& ep,
                        HeadKind head, const TrainConfig& cfg,
                        ConfusionMatrix* cm_out = nullptr);

// frozen trunk + one new head trained on all target samples by mini-batch
// cross-entropy; returns balanced accuracy on the target test set
double transfer_plain(const SourceModel& source, const Dataset& data,
                      const std::vector<std::size_t>& fit_idx,
                      const std::vector<std::size_t>& val_idx,
                      const std::vector<std::size_t>& test_idx, HeadKind head,
                      const TrainConfig& cfg);

// helpers shared with the bench layer
std::vector<int> local_labels(const Dataset& data, const std::vector<std::size_t>& idx,
                              const std::vector<int>& classes);
double classifier_balanced_accuracy(Encoder& enc, const std::function<Tensor(const Tensor&)>& head,
                                    const Dataset& data, const std::vector<std::size_t>& idx,
                                    const std::vector<int>& classes, std::size_t batch_size = 256,
                                    ConfusionMatrix* cm_out = nullptr);

}  // namespace fewflow
