#pragma once

// Synthetic classification tasks whose label depends on a handful of marked
// token positions.
//
// Token ids: 0 is padding, 1..C are signal tokens (value v is written as
// token v + 1, so the token itself marks the position as a signal), and
// C+1..V-1 are filler. The label is the plurality value among the signal
// tokens; the generator only emits value multisets with a unique mode.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tspeft {

inline constexpr int kPadToken = 0;

struct Example {
  std::vector<int> tokens;
  int label = 0;
  std::vector<int> signal_positions;  // ascending

  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskParams {
  std::uint64_t seed = 1;
  int n_examples = 0;
  int seq_len = 32;
  int vocab_size = 64;
  int num_classes = 4;
  int k_signal = 4;
  // Sequences shorter than seq_len are right-padded with kPadToken.
  int min_len = 32;

  friend bool operator==(const TaskParams&, const TaskParams&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  int vocab_size = 0;
  int seq_len = 0;
  int num_classes = 0;

  std::size_t size() const noexcept { return examples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

void validate_task_params(const TaskParams& p);

// Examples are pairwise distinct as token sequences.
Dataset gen_sparse_signal_task(const TaskParams& p);

// Plurality value among the signal tokens of `tokens`, or -1 if there is no
// unique mode. Used by the generator; tests carry their own oracle.
int plurality_label(const std::vector<int>& tokens, int num_classes);

enum class ShiftRule { identity, permute_classes, move_signals };

ShiftRule parse_shift_rule(const std::string& name);
std::string to_string(ShiftRule rule);

// permute_classes: labels mapped through a seeded non-identity permutation.
// move_signals: each example's signal values move to a different position
// set (order preserved), vacated positions get fresh filler.
Dataset gen_shifted_task(const Dataset& base, std::uint64_t seed, ShiftRule rule);

// Seeded class permutation used by permute_classes.
std::vector<int> class_permutation(std::uint64_t seed, int num_classes);

struct TaskSplits {
  Dataset train;
  Dataset val;
};

// One stream of n_train + n_val distinct examples, split in order, so the
// splits are disjoint.
TaskSplits gen_task_splits(TaskParams p, int n_train, int n_val);

bool valid_dataset(const Dataset& d);

// Line format: space-separated token ids, a tab, the label.
std::string export_text(const Dataset& d);
void write_text(const Dataset& d, const std::filesystem::path& path);
Dataset import_text(const std::string& text, int vocab_size, int num_classes);
Dataset read_text(const std::filesystem::path& path, int vocab_size, int num_classes);

// Frequency of each label.
std::vector<int> label_histogram(const Dataset& d);

}  // namespace tspeft
