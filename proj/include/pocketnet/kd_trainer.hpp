#pragma once

// Teacher training with per-epoch checkpointing and student training in
// three modes: ArcFace only, distillation from the converged teacher, and
// multi-step distillation where epoch e of the student reads the teacher's
// epoch-e checkpoint. Teacher and plain-student runs share one training
// core, so a kd-free student run is bit-identical to teacher training.

#include <filesystem>
#include <optional>
#include <vector>

#include "pocketnet/io.hpp"
#include "pocketnet/losses.hpp"
#include "pocketnet/net_builder.hpp"

namespace pocketnet {

struct TrainSchedule {
    int total_iterations = 0;
    float lr_init = 0.1f;
    std::vector<int> milestones;  // iteration indices, strictly increasing
    float milestone_factor = 0.1f;
    int batch_size = 16;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    uint32_t seed = 0;

    void validate() const;
};

// lr_init * factor^(number of milestones at or before `iteration`)
float step_lr(int iteration, const TrainSchedule& schedule);

// milestone fractions 80/295, 140/295, 210/295, 280/295 of the budget
std::vector<int> desk_milestones(int total_iterations);

struct TeacherTimeline {
    struct Entry {
        int epoch = 0;
        std::filesystem::path checkpoint;
    };
    std::vector<Entry> entries;

    const Entry& converged() const;
    void save_index(const std::filesystem::path& dir) const;
    static TeacherTimeline load(const std::filesystem::path& dir);
};

std::filesystem::path teacher_for_epoch(const TeacherTimeline& timeline, int epoch,
                                        KdMode mode);

struct IterationLog {
    int iteration = 0;
    int epoch = 0;
    float arc_loss = 0.0f;
    std::optional<float> mse_loss;
    float lr = 0.0f;
    std::optional<int> teacher_epoch_used;
};

// `iteration,epoch,arc_loss,mse_loss,lr,teacher_epoch_used` (kd-free runs
// leave mse_loss and teacher_epoch_used empty)
std::string history_csv(const std::vector<IterationLog>& history);

// state refs of a network plus its ArcFace head (for checkpointing)
std::vector<NamedTensorRef> training_state(PocketNet& net, ArcFaceHead& head);

TeacherTimeline train_teacher(PocketNet& teacher, ArcFaceHead& head, const Dataset& data,
                              const TrainSchedule& schedule,
                              const std::filesystem::path& store,
                              std::vector<IterationLog>* log = nullptr);

// teacher may be null iff loss_config.kd_mode == none
std::vector<IterationLog> train_student(PocketNet& student, ArcFaceHead& head,
                                        const Dataset& data, const TrainSchedule& schedule,
                                        const LossConfig& loss_config,
                                        const TeacherTimeline* timeline, PocketNet* teacher,
                                        ArcFaceHead* teacher_head);

}  // namespace pocketnet
