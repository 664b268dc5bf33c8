#include "pocketnet/kd_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pocketnet/errors.hpp"

namespace pocketnet {

namespace fs = std::filesystem;

void TrainSchedule::validate() const {
    if (total_iterations < 1) throw UsageError("total_iterations must be >= 1");
    if (lr_init <= 0.0f) throw UsageError("lr_init must be > 0");
    if (batch_size < 2) throw UsageError("batch_size must be >= 2 (batch-norm statistics)");
    if (momentum < 0.0f || weight_decay < 0.0f)
        throw UsageError("momentum and weight_decay must be >= 0");
    for (size_t i = 0; i < milestones.size(); ++i) {
        if (milestones[i] < 0 || milestones[i] >= total_iterations)
            throw UsageError("milestones must lie in [0, total_iterations)");
        if (i > 0 && milestones[i] <= milestones[i - 1])
            throw UsageError("milestones must be strictly increasing");
    }
}

float step_lr(int iteration, const TrainSchedule& schedule) {
    if (iteration < 0 || iteration >= schedule.total_iterations)
        throw UsageError("step_lr iteration " + std::to_string(iteration) +
                         " outside [0, " + std::to_string(schedule.total_iterations) + ")");
    float lr = schedule.lr_init;
    for (int m : schedule.milestones)
        if (iteration >= m) lr *= schedule.milestone_factor;
    return lr;
}

std::vector<int> desk_milestones(int total_iterations) {
    std::vector<int> out;
    for (int num : {80, 140, 210, 280}) {
        const int m = static_cast<int>(static_cast<long>(total_iterations) * num / 295);
        if (m > 0 && m < total_iterations && (out.empty() || m > out.back())) out.push_back(m);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Teacher timeline
// ---------------------------------------------------------------------------

const TeacherTimeline::Entry& TeacherTimeline::converged() const {
    if (entries.empty()) throw DataError("teacher timeline is empty");
    return entries.back();
}

void TeacherTimeline::save_index(const fs::path& dir) const {
    std::ostringstream os;
    os << "epoch,checkpoint\n";
    for (const auto& e : entries)
        os << e.epoch << "," << e.checkpoint.filename().string() << "\n";
    atomic_write(dir / "timeline.csv", os.str());
}

TeacherTimeline TeacherTimeline::load(const fs::path& dir) {
    std::ifstream f(dir / "timeline.csv");
    if (!f) throw DataError("cannot open timeline index: " + (dir / "timeline.csv").string());
    TeacherTimeline t;
    std::string line;
    std::getline(f, line);  // header
    int expected = 1;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw DataError("malformed timeline line: " + line);
        Entry e;
        e.epoch = std::stoi(line.substr(0, comma));
        e.checkpoint = dir / line.substr(comma + 1);
        if (e.epoch != expected)
            throw DataError("timeline epochs must be contiguous from 1, got " +
                            std::to_string(e.epoch));
        if (!fs::exists(e.checkpoint))
            throw DataError("timeline references a missing checkpoint: " +
                            e.checkpoint.string());
        t.entries.push_back(std::move(e));
        ++expected;
    }
    if (t.entries.empty()) throw DataError("teacher timeline is empty");
    return t;
}

fs::path teacher_for_epoch(const TeacherTimeline& timeline, int epoch, KdMode mode) {
    if (mode == KdMode::converged) return timeline.converged().checkpoint;
    if (mode != KdMode::multi_step)
        throw UsageError("teacher_for_epoch requires kd mode converged or multi_step");
    if (epoch < 1 || epoch > static_cast<int>(timeline.entries.size()))
        throw DataError("teacher epoch " + std::to_string(epoch) + " outside timeline [1, " +
                        std::to_string(timeline.entries.size()) + "]");
    return timeline.entries[epoch - 1].checkpoint;
}

std::string history_csv(const std::vector<IterationLog>& history) {
    std::ostringstream os;
    os << "iteration,epoch,arc_loss,mse_loss,lr,teacher_epoch_used\n";
    char buf[160];
    for (const auto& h : history) {
        std::string mse, teach;
        if (h.mse_loss) {
            std::snprintf(buf, sizeof(buf), "%.6f", static_cast<double>(*h.mse_loss));
            mse = buf;
        }
        if (h.teacher_epoch_used) teach = std::to_string(*h.teacher_epoch_used);
        std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%s,%.6g,%s\n", h.iteration, h.epoch,
                      static_cast<double>(h.arc_loss), mse.c_str(),
                      static_cast<double>(h.lr), teach.c_str());
        os << buf;
    }
    return os.str();
}

std::vector<NamedTensorRef> training_state(PocketNet& net, ArcFaceHead& head) {
    auto state = net.state();
    state.push_back({head.centers->name, head.centers->value.shape(),
                     &head.centers->value.data()});
    return state;
}

// ---------------------------------------------------------------------------
// Training core
// ---------------------------------------------------------------------------

namespace {

struct KdContext {
    KdMode mode = KdMode::none;
    float lambda = 0.0f;
    const TeacherTimeline* timeline = nullptr;
    PocketNet* teacher = nullptr;
    ArcFaceHead* teacher_head = nullptr;
};

// Shared loop for teacher training (kd == nullptr, with checkpointing) and
// all student modes. With kd disabled the executed float operations are
// identical to the teacher path, which keeps the "no-KD student == plain
// ArcFace run" equivalence exact.
std::vector<IterationLog> run_training(PocketNet& net, ArcFaceHead& head, const Dataset& data,
                                       const TrainSchedule& schedule, const KdContext* kd,
                                       const fs::path* store, TeacherTimeline* out_timeline) {
    schedule.validate();
    data.validate();
    if (static_cast<int>(data.count()) < schedule.batch_size)
        throw DataError("dataset smaller than one batch");
    const int iters_per_epoch = static_cast<int>(data.count()) / schedule.batch_size;
    const int n_epochs =
        (schedule.total_iterations + iters_per_epoch - 1) / iters_per_epoch;

    const bool kd_on = kd && kd->mode != KdMode::none;
    if (kd_on) {
        if (!kd->teacher || !kd->timeline)
            throw UsageError("kd training needs a teacher network and timeline");
        if (kd->teacher->variant().embedding_dim != net.variant().embedding_dim)
            throw DataError("teacher embedding dim " +
                            std::to_string(kd->teacher->variant().embedding_dim) +
                            " != student embedding dim " +
                            std::to_string(net.variant().embedding_dim));
        if (kd->mode == KdMode::multi_step &&
            n_epochs > static_cast<int>(kd->timeline->entries.size()))
            throw DataError("multi-step kd needs a teacher checkpoint per student epoch (" +
                            std::to_string(n_epochs) + " needed, " +
                            std::to_string(kd->timeline->entries.size()) + " available)");
    }

    auto params = net.parameters();
    params.push_back(head.centers);

    Rng order_rng(schedule.seed + 0x11u);
    Rng flip_rng(schedule.seed + 0x22u);

    std::vector<IterationLog> history;
    history.reserve(schedule.total_iterations);
    std::vector<int> order(data.count());
    std::iota(order.begin(), order.end(), 0);

    int it = 0;
    for (int epoch = 1; epoch <= n_epochs && it < schedule.total_iterations; ++epoch) {
        if (kd_on) {
            const fs::path ckpt = teacher_for_epoch(*kd->timeline, epoch, kd->mode);
            auto arrays = load_checkpoint(ckpt);
            auto state = training_state(*kd->teacher, *kd->teacher_head);
            load_into_state(arrays, state);
        }
        order_rng.shuffle(order);
        for (int b = 0; b < iters_per_epoch && it < schedule.total_iterations; ++b, ++it) {
            std::vector<int> batch(order.begin() + static_cast<size_t>(b) * schedule.batch_size,
                                   order.begin() +
                                       static_cast<size_t>(b + 1) * schedule.batch_size);
            std::vector<int> labels;
            Tensor x = make_batch(data, batch, &flip_rng, labels);
            const float lr = step_lr(it, schedule);

            Tensor emb = net.forward(x, true);
            Tensor arc = arcface_loss(emb, labels, head);

            IterationLog row;
            row.iteration = it;
            row.epoch = epoch;
            row.lr = lr;
            Tensor loss = arc;
            if (kd_on) {
                Tensor teacher_emb;
                {
                    NoGradGuard guard;
                    teacher_emb = l2_normalize_rows(kd->teacher->forward(x, false));
                }
                Tensor mse = embed_mse(l2_normalize_rows(emb), teacher_emb);
                LossConfig cfg{kd->lambda, kd->mode};
                loss = combined_loss(arc, mse, cfg);
                row.mse_loss = mse.item();
                row.teacher_epoch_used =
                    kd->mode == KdMode::multi_step
                        ? epoch
                        : static_cast<int>(kd->timeline->entries.size());
            }
            row.arc_loss = arc.item();
            if (!std::isfinite(loss.item()))
                throw NumericError("non-finite training loss at iteration " +
                                   std::to_string(it));
            zero_grads(params);
            backward(loss);
            sgd_step(params, lr, schedule.momentum, schedule.weight_decay);
            history.push_back(row);
        }
        if (store) {
            const fs::path ckpt = *store / ("teacher_epoch_" + std::to_string(epoch) + ".pktn");
            auto state = training_state(net, head);
            save_checkpoint(snapshot_state(state), ckpt);
            out_timeline->entries.push_back({epoch, ckpt});
        }
    }
    return history;
}

}  // namespace

TeacherTimeline train_teacher(PocketNet& teacher, ArcFaceHead& head, const Dataset& data,
                              const TrainSchedule& schedule, const fs::path& store,
                              std::vector<IterationLog>* log) {
    std::error_code ec;
    fs::create_directories(store, ec);
    if (ec && !fs::is_directory(store))
        throw DataError("cannot create checkpoint store: " + store.string());
    TeacherTimeline timeline;
    auto history = run_training(teacher, head, data, schedule, nullptr, &store, &timeline);
    if (log) *log = std::move(history);
    timeline.save_index(store);
    return timeline;
}

std::vector<IterationLog> train_student(PocketNet& student, ArcFaceHead& head,
                                        const Dataset& data, const TrainSchedule& schedule,
                                        const LossConfig& loss_config,
                                        const TeacherTimeline* timeline, PocketNet* teacher,
                                        ArcFaceHead* teacher_head) {
    if (loss_config.kd_mode == KdMode::none)
        return run_training(student, head, data, schedule, nullptr, nullptr, nullptr);
    KdContext kd;
    kd.mode = loss_config.kd_mode;
    kd.lambda = loss_config.lambda;
    kd.timeline = timeline;
    kd.teacher = teacher;
    kd.teacher_head = teacher_head;
    return run_training(student, head, data, schedule, &kd, nullptr, nullptr);
}

}  // namespace pocketnet
