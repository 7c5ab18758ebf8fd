#include "tspeft/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tspeft/errors.hpp"
#include "tspeft/numkernel.hpp"

namespace tspeft {

namespace {

std::string sequence_key(const std::vector<int>& tokens) {
  std::string key;
  key.reserve(tokens.size());
  for (int t : tokens) key.push_back(static_cast<char>(t));
  return key;
}

int filler_token(Rng& rng, int vocab_size, int num_classes) {
  const int first = num_classes + 1;
  return first + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - first)));
}

// k distinct positions from [0, len), ascending.
std::vector<int> sample_positions(Rng& rng, int len, int k) {
  std::vector<int> pool(static_cast<std::size_t>(len));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(len - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

int unique_mode(const std::vector<int>& values, int num_classes) {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int v : values) ++counts[static_cast<std::size_t>(v)];
  const int best = *std::max_element(counts.begin(), counts.end());
  if (best == 0 || std::count(counts.begin(), counts.end(), best) != 1) return -1;
  return static_cast<int>(std::find(counts.begin(), counts.end(), best) - counts.begin());
}

int valid_length(const std::vector<int>& tokens) {
  return static_cast<int>(std::count_if(tokens.begin(), tokens.end(), [](int t) { return t != kPadToken; }));
}

}  // namespace

void validate_task_params(const TaskParams& p) {
  auto fail = [](const std::string& msg) { throw ConfigError("task: " + msg); };
  if (p.n_examples < 0) fail("n_examples must be >= 0");
  if (p.seq_len < 1) fail("seq_len must be >= 1");
  if (p.num_classes < 2) fail("num_classes must be >= 2");
  if (p.vocab_size < p.num_classes + 2) fail("vocab_size must be >= num_classes + 2");
  if (p.vocab_size > 255) fail("vocab_size must be <= 255");
  if (p.k_signal < 1 || p.k_signal > p.seq_len) fail("k_signal must be in [1, seq_len]");
  if (p.min_len < p.k_signal || p.min_len > p.seq_len) fail("min_len must be in [k_signal, seq_len]");
}

int plurality_label(const std::vector<int>& tokens, int num_classes) {
  std::vector<int> values;
  for (int t : tokens)
    if (t >= 1 && t <= num_classes) values.push_back(t - 1);
  if (values.empty()) return -1;
  return unique_mode(values, num_classes);
}

Dataset gen_sparse_signal_task(const TaskParams& p) {
  validate_task_params(p);
  Dataset d;
  d.vocab_size = p.vocab_size;
  d.seq_len = p.seq_len;
  d.num_classes = p.num_classes;
  d.examples.reserve(static_cast<std::size_t>(p.n_examples));

  Rng rng(p.seed);
  std::unordered_set<std::string> seen;
  const long max_attempts = 64L * p.n_examples + 1024;
  long attempts = 0;
  while (static_cast<int>(d.examples.size()) < p.n_examples) {
    if (++attempts > max_attempts)
      throw ConfigError("task: cannot generate " + std::to_string(p.n_examples) +
                        " distinct examples with these parameters");
    Example ex;
    int len = p.seq_len;
    if (p.min_len < p.seq_len)
      len = p.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(p.seq_len - p.min_len + 1)));
    ex.tokens.assign(static_cast<std::size_t>(p.seq_len), kPadToken);
    for (int i = 0; i < len; ++i) ex.tokens[static_cast<std::size_t>(i)] = filler_token(rng, p.vocab_size, p.num_classes);

    std::vector<int> values(static_cast<std::size_t>(p.k_signal));
    do {
      for (int& v : values) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.num_classes)));
      ex.label = unique_mode(values, p.num_classes);
    } while (ex.label < 0);

    ex.signal_positions = sample_positions(rng, len, p.k_signal);
    for (std::size_t j = 0; j < values.size(); ++j)
      ex.tokens[static_cast<std::size_t>(ex.signal_positions[j])] = values[j] + 1;

    if (!seen.insert(sequence_key(ex.tokens)).second) continue;
    d.examples.push_back(std::move(ex));
  }
  return d;
}

ShiftRule parse_shift_rule(const std::string& name) {
  if (name == "identity") return ShiftRule::identity;
  if (name == "permute_classes") return ShiftRule::permute_classes;
  if (name == "move_signals") return ShiftRule::move_signals;
  throw ConfigError("unknown shift_rule '" + name + "'");
}

std::string to_string(ShiftRule rule) {
  switch (rule) {
    case ShiftRule::identity: return "identity";
    case ShiftRule::permute_classes: return "permute_classes";
    case ShiftRule::move_signals: return "move_signals";
  }
  return "?";
}

std::vector<int> class_permutation(std::uint64_t seed, int num_classes) {
  if (num_classes < 2) throw ConfigError("class permutation needs at least two classes");
  std::vector<int> perm(static_cast<std::size_t>(num_classes));
  Rng rng(seed);
  for (;;) {
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    for (int c = 0; c < num_classes; ++c)
      if (perm[static_cast<std::size_t>(c)] != c) return perm;
  }
}

Dataset gen_shifted_task(const Dataset& base, std::uint64_t seed, ShiftRule rule) {
  if (!valid_dataset(base)) throw ContractError("gen_shifted_task: invalid base dataset");
  Dataset out = base;
  switch (rule) {
    case ShiftRule::identity:
      break;
    case ShiftRule::permute_classes: {
      const auto perm = class_permutation(seed, base.num_classes);
      for (auto& ex : out.examples) ex.label = perm[static_cast<std::size_t>(ex.label)];
      break;
    }
    case ShiftRule::move_signals: {
      Rng rng(seed);
      for (auto& ex : out.examples) {
        const int len = valid_length(ex.tokens);
        const int k = static_cast<int>(ex.signal_positions.size());
        if (k >= len)
          throw ConfigError("move_signals needs at least one non-signal position in every example");
        std::vector<int> values;
        for (int pos : ex.signal_positions) values.push_back(ex.tokens[static_cast<std::size_t>(pos)]);
        std::vector<int> moved;
        do {
          moved = sample_positions(rng, len, k);
        } while (moved == ex.signal_positions);
        for (int pos : ex.signal_positions)
          ex.tokens[static_cast<std::size_t>(pos)] = filler_token(rng, base.vocab_size, base.num_classes);
        for (std::size_t j = 0; j < moved.size(); ++j) ex.tokens[static_cast<std::size_t>(moved[j])] = values[j];
        ex.signal_positions = std::move(moved);
      }
      break;
    }
  }
  return out;
}

TaskSplits gen_task_splits(TaskParams p, int n_train, int n_val) {
  if (n_train < 1 || n_val < 1) throw ConfigError("task: n_train and n_val must be >= 1");
  p.n_examples = n_train + n_val;
  Dataset all = gen_sparse_signal_task(p);
  TaskSplits s;
  s.train.vocab_size = s.val.vocab_size = all.vocab_size;
  s.train.seq_len = s.val.seq_len = all.seq_len;
  s.train.num_classes = s.val.num_classes = all.num_classes;
  auto mid = all.examples.begin() + n_train;
  s.train.examples.assign(std::make_move_iterator(all.examples.begin()), std::make_move_iterator(mid));
  s.val.examples.assign(std::make_move_iterator(mid), std::make_move_iterator(all.examples.end()));
  return s;
}

bool valid_dataset(const Dataset& d) {
  if (d.seq_len < 1 || d.num_classes < 2 || d.vocab_size < d.num_classes + 2) return false;
  for (const auto& ex : d.examples) {
    if (static_cast<int>(ex.tokens.size()) != d.seq_len) return false;
    if (ex.label < 0 || ex.label >= d.num_classes) return false;
    for (int t : ex.tokens)
      if (t < 0 || t >= d.vocab_size) return false;
    if (valid_length(ex.tokens) == 0) return false;
    for (int pos : ex.signal_positions)
      if (pos < 0 || pos >= d.seq_len) return false;
  }
  return true;
}

std::string export_text(const Dataset& d) {
  std::ostringstream os;
  for (const auto& ex : d.examples) {
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) os << ' ';
      os << ex.tokens[i];
    }
    os << '\t' << ex.label << '\n';
  }
  return os.str();
}

void write_text(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot open " + path.string() + " for writing");
  f << export_text(d);
  if (!f) throw ArtifactError("write failed for " + path.string());
}

Dataset import_text(const std::string& text, int vocab_size, int num_classes) {
  Dataset d;
  d.vocab_size = vocab_size;
  d.num_classes = num_classes;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError("dataset line " + std::to_string(lineno) + ": missing tab");
    Example ex;
    std::istringstream toks(line.substr(0, tab));
    int t;
    while (toks >> t) ex.tokens.push_back(t);
    ex.label = std::stoi(line.substr(tab + 1));
    for (int i = 0; i < static_cast<int>(ex.tokens.size()); ++i) {
      const int tok = ex.tokens[static_cast<std::size_t>(i)];
      if (tok >= 1 && tok <= num_classes) ex.signal_positions.push_back(i);
    }
    if (d.seq_len == 0) d.seq_len = static_cast<int>(ex.tokens.size());
    d.examples.push_back(std::move(ex));
  }
  if (!valid_dataset(d)) throw ConfigError("imported dataset failed validation");
  return d;
}

Dataset read_text(const std::filesystem::path& path, int vocab_size, int num_classes) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return import_text(ss.str(), vocab_size, num_classes);
}

std::vector<int> label_histogram(const Dataset& d) {
  std::vector<int> h(static_cast<std::size_t>(d.num_classes), 0);
  for (const auto& ex : d.examples) ++h[static_cast<std::size_t>(ex.label)];
  return h;
}

}  // namespace tspeft
