#include "mug/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace mug {

namespace {
const char* kSpecialNames[Vocab::kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<mask>"};
}

Vocab::Vocab(std::vector<std::string> words) {
  id_to_word_.reserve(words.size() + kNumSpecials);
  for (const char* s : kSpecialNames) id_to_word_.emplace_back(s);
  for (auto& w : words) id_to_word_.push_back(std::move(w));
  for (size_t i = 0; i < id_to_word_.size(); ++i) {
    if (!word_to_id_.emplace(id_to_word_[i], static_cast<int32_t>(i)).second)
      throw ParseError("vocab: duplicate token '" + id_to_word_[i] + "'");
  }
}

int32_t Vocab::id(const std::string& word) const {
  auto it = word_to_id_.find(word);
  if (it == word_to_id_.end()) throw ParseError("vocab: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocab::word(int32_t id) const {
  if (id < 0 || static_cast<size_t>(id) >= id_to_word_.size())
    throw ParseError("vocab: id " + std::to_string(id) + " out of range");
  return id_to_word_[static_cast<size_t>(id)];
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("vocab: cannot write " + path);
  for (const auto& w : id_to_word_) out << w << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("vocab: cannot read " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.size() < kNumSpecials) throw ParseError("vocab: file " + path + " is too short");
  for (int i = 0; i < kNumSpecials; ++i)
    if (lines[static_cast<size_t>(i)] != kSpecialNames[i])
      throw ParseError("vocab: line " + std::to_string(i) + " must be '" +
                       kSpecialNames[i] + "'");
  return Vocab(std::vector<std::string>(lines.begin() + kNumSpecials, lines.end()));
}

std::vector<std::string> Vocab::words() const {
  return std::vector<std::string>(id_to_word_.begin() + kNumSpecials, id_to_word_.end());
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocab build_vocab(const std::vector<std::string>& captions) {
  if (captions.empty()) throw ConfigError("build_vocab: empty corpus");
  std::set<std::string> uniq;
  for (const auto& c : captions)
    for (auto& w : split_words(c)) uniq.insert(w);
  return Vocab(std::vector<std::string>(uniq.begin(), uniq.end()));
}

TokenSequence encode_caption(const std::string& text, const Vocab& vocab, size_t j_max,
                             bool open_vocab, size_t* truncated) {
  if (j_max < 2) throw ConfigError("encode_caption: j_max must be at least 2");
  auto words = split_words(text);
  size_t keep = std::min(words.size(), j_max - 2);
  if (truncated && words.size() > keep) *truncated += words.size() - keep;
  TokenSequence seq;
  seq.j_max = j_max;
  seq.ids.assign(j_max, Vocab::kPad);
  seq.ids[0] = Vocab::kBos;
  for (size_t i = 0; i < keep; ++i) {
    if (open_vocab && !vocab.contains(words[i]))
      seq.ids[1 + i] = Vocab::kMaskWord;
    else
      seq.ids[1 + i] = vocab.id(words[i]);
  }
  seq.ids[1 + keep] = Vocab::kEos;
  seq.length = keep + 2;
  return seq;
}

std::string detokenize(const std::vector<int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (int32_t id : ids) {
    if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

AugmentedCaption augment_caption(const TokenSequence& tokens, const Vocab& vocab, uint64_t seed) {
  size_t k = tokens.word_count();
  enum Action : uint8_t { kKeep, kMask, kReplace, kDelete };
  std::vector<Action> action(k, kKeep);
  std::vector<int32_t> replacement(k, 0);
  Rng rng(seed);
  auto selected = static_cast<size_t>(std::lround(0.20 * static_cast<double>(k)));
  if (selected > 0) {
    std::vector<size_t> positions(k);
    for (size_t i = 0; i < k; ++i) positions[i] = i;
    rng.shuffle(positions);
    positions.resize(selected);
    std::sort(positions.begin(), positions.end());
    for (size_t pos : positions) {
      double u = rng.u01();
      if (u < 0.50) {
        action[pos] = kMask;
      } else if (u < 0.60) {
        action[pos] = kReplace;
        if (vocab.word_count() == 0)
          action[pos] = kMask;  // degenerate vocab: fall back to masking
        else
          replacement[pos] =
              Vocab::kNumSpecials + static_cast<int32_t>(rng.index(vocab.word_count()));
      } else {
        action[pos] = kDelete;
      }
    }
  }

  std::vector<int32_t> in_words, label_words;
  for (size_t i = 0; i < k; ++i) {
    int32_t original = tokens.ids[1 + i];
    switch (action[i]) {
      case kKeep:
        in_words.push_back(original);
        label_words.push_back(original);
        break;
      case kMask:
        in_words.push_back(Vocab::kMaskWord);
        label_words.push_back(original);
        break;
      case kReplace:
        in_words.push_back(replacement[i]);
        label_words.push_back(original);
        break;
      case kDelete:
        break;
    }
  }

  auto frame = [&](const std::vector<int32_t>& words) {
    TokenSequence seq;
    seq.j_max = tokens.j_max;
    seq.ids.assign(tokens.j_max, Vocab::kPad);
    seq.ids[0] = Vocab::kBos;
    for (size_t i = 0; i < words.size(); ++i) seq.ids[1 + i] = words[i];
    seq.ids[1 + words.size()] = Vocab::kEos;
    seq.length = words.size() + 2;
    return seq;
  };
  AugmentedCaption out;
  out.input = frame(in_words);
  out.labels = frame(label_words);
  return out;
}

TeacherForcingBatch shift_for_teacher_forcing(const TokenSequence& tokens) {
  return shift_for_teacher_forcing(tokens, tokens);
}

TeacherForcingBatch shift_for_teacher_forcing(const TokenSequence& input,
                                              const TokenSequence& labels) {
  if (input.length < 2 || labels.length < 2)
    throw ConfigError("shift_for_teacher_forcing: sequence length must be at least 2");
  if (input.j_max != labels.j_max || input.length != labels.length)
    throw ShapeError("shift_for_teacher_forcing: input and label sequences disagree");
  size_t l = input.j_max;
  TeacherForcingBatch out;
  out.input.assign(input.ids.begin(), input.ids.begin() + static_cast<long>(l - 1));
  out.labels.assign(labels.ids.begin() + 1, labels.ids.end());
  out.loss_mask.resize(l - 1);
  for (size_t i = 0; i + 1 < l; ++i) out.loss_mask[i] = out.labels[i] != Vocab::kPad;
  return out;
}

AttentionMaskCausal causal_mask(size_t len) {
  if (len < 1) throw ConfigError("causal_mask: length must be positive");
  AttentionMaskCausal mask;
  mask.rows = len;
  mask.cols = len;
  mask.allowed.assign(len * len, 0);
  for (size_t q = 0; q < len; ++q)
    for (size_t k = 0; k <= q; ++k) mask.allowed[q * len + k] = 1;
  return mask;
}

}  // namespace mug
