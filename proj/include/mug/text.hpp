#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mug/common.hpp"
#include "mug/tensor.hpp"

namespace mug {

/// Word-level vocabulary with reserved specials at fixed ids.
class Vocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;
  static constexpr int32_t kMaskWord = 3;
  static constexpr int32_t kNumSpecials = 4;

  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);  // regular words, id = 4 + position

  size_t size() const { return id_to_word_.size(); }
  size_t word_count() const { return size() - kNumSpecials; }
  int32_t id(const std::string& word) const;       // throws ParseError if absent
  bool contains(const std::string& word) const { return word_to_id_.count(word) != 0; }
  const std::string& word(int32_t id) const;

  /// One token per line, line number = id (specials included).
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  /// Regular words in id order, for embedding in checkpoint metadata.
  std::vector<std::string> words() const;

 private:
  std::unordered_map<std::string, int32_t> word_to_id_;
  std::vector<std::string> id_to_word_;
};

/// BOS/EOS framed, PAD-filled id sequence.
struct TokenSequence {
  std::vector<int32_t> ids;  // length j_max
  size_t length = 0;         // tokens before padding, BOS and EOS included
  size_t j_max = 0;

  size_t word_count() const { return length - 2; }
};

/// Lower-triangular self-attention constraint; allowed(q, k) iff k <= q.
using AttentionMaskCausal = BoolMask;

struct TeacherForcingBatch {
  std::vector<int32_t> input;   // ids[0 .. L-1)
  std::vector<int32_t> labels;  // ids[1 .. L)
  std::vector<uint8_t> loss_mask;  // true where labels != PAD
};

struct AugmentedCaption {
  TokenSequence input;   // corrupted decoder input
  TokenSequence labels;  // original words aligned to the input (deletions applied)
};

/// Lowercased whitespace-split vocabulary, regular words sorted
/// lexicographically. Throws on an empty corpus.
Vocab build_vocab(const std::vector<std::string>& captions);

/// [BOS, w1..wk, EOS, PAD...]; silently truncates to j_max - 2 words (the
/// count is reported through `truncated` when given). Out-of-vocabulary
/// words throw unless open_vocab, which maps them to MASKWORD.
TokenSequence encode_caption(const std::string& text, const Vocab& vocab, size_t j_max,
                             bool open_vocab = false, size_t* truncated = nullptr);

std::vector<std::string> split_words(const std::string& text);
std::string detokenize(const std::vector<int32_t>& ids, const Vocab& vocab);

/// Word-level corruption: round(0.20 k) positions are selected without
/// replacement; each becomes MASKWORD with prob 0.50, a random regular word
/// with prob 0.10, or is deleted with prob 0.40. Deletions shorten input and
/// labels jointly; specials are never touched.
AugmentedCaption augment_caption(const TokenSequence& tokens, const Vocab& vocab, uint64_t seed);

TeacherForcingBatch shift_for_teacher_forcing(const TokenSequence& tokens);
/// Variant with separate decoder-input and label streams (same framing);
/// used when the input was corrupted but targets stay clean.
TeacherForcingBatch shift_for_teacher_forcing(const TokenSequence& input,
                                              const TokenSequence& labels);

AttentionMaskCausal causal_mask(size_t len);

}  // namespace mug
