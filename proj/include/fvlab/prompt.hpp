#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fvlab/scenegen.hpp"

namespace fvlab {

using TokenId = int;

// Token ids 0..31 are the object labels (token id == object id); the eight
// special tokens follow.
enum class Special : TokenId {
  Bos = kNumObjects,
  QMarker,
  AMarker,
  Period,
  Eoc,
  ImgStart,
  ImgEnd,
  Pad,
};

inline constexpr int kVocabSize = kNumObjects + 8;

constexpr TokenId token(Special s) noexcept { return static_cast<TokenId>(s); }

class Vocabulary {
 public:
  Vocabulary();

  int size() const noexcept { return kVocabSize; }
  std::string_view name(TokenId id) const;
  TokenId id(std::string_view name) const;
  bool is_object(TokenId id) const noexcept { return id >= 0 && id < kNumObjects; }

  // "id<TAB>name" per line.
  std::string dump() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::array<std::string, kVocabSize> names_;
};

const Vocabulary& default_vocabulary();

TokenId first_answer_token(ObjectId label, const Vocabulary& vocab = default_vocabulary());
TokenId first_answer_token(std::string_view label, const Vocabulary& vocab = default_vocabulary());

struct Element {
  enum class Kind : std::uint8_t { Token, SceneSlot };
  Kind kind = Kind::Token;
  TokenId token = 0;
  int scene_id = -1;
  int slot = -1;

  static Element tok(TokenId t) { return {Kind::Token, t, -1, -1}; }
  static Element tok(Special s) { return {Kind::Token, fvlab::token(s), -1, -1}; }
  static Element scene_slot(int scene_id, int slot) { return {Kind::SceneSlot, 0, scene_id, slot}; }
  bool is_token(TokenId t) const { return kind == Kind::Token && token == t; }
  friend bool operator==(const Element&, const Element&) = default;
};

struct TokenSequence {
  std::vector<Element> elements;
  // Index of each demo answer token (the element right after a demo A marker).
  std::vector<int> answer_positions;
  // Index of the query A marker; always the last element.
  int final_position = 0;
  // Token the model should emit after final_position. Not part of elements.
  TokenId gold_token = 0;

  int size() const noexcept { return static_cast<int>(elements.size()); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline constexpr int kDemoLength = 15;
inline constexpr int kQueryLength = 12;

constexpr int prompt_length(int n_shots) noexcept { return 1 + kDemoLength * n_shots + kQueryLength; }

// Builds BOS, then per demo
//   IMG_START 6xslot IMG_END Q x . A y . EOC
// and finally the query segment ending at A. Throws SequenceTooLong when the
// prompt exceeds `max_len`.
TokenSequence encode_prompt(const TaskInstance& task, int max_len,
                            const Vocabulary& vocab = default_vocabulary());

// Positions whose next-token logits are scored in training: the A marker
// before each demo answer, then the final position.
std::vector<int> prediction_positions(const TokenSequence& seq);

}  // namespace fvlab
