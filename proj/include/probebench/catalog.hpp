#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>
#include <string>
#include <string_view>

namespace probebench {

// Corpus attributes of the benchmark datasets.
struct DatasetInfo {
  std::string_view id;
  std::string_view language;
  std::size_t classes;
  std::size_t utterances;
  std::size_t speakers;
  double average_duration_s;
  double total_duration_h;
};

inline constexpr std::array<DatasetInfo, 7> dataset_catalog{{
    {"aesdd", "Greek", 5, 604, 6, 4.2, 0.7},
    {"cafe", "French", 7, 864, 12, 4.5, 1.1},
    {"emodb", "German", 7, 535, 10, 2.8, 0.4},
    {"emovo", "Italian", 7, 588, 6, 3.1, 0.5},
    {"iemocap", "English", 4, 5531, 10, 3.4, 7.0},
    {"ravdess", "English", 8, 1440, 24, 3.7, 1.5},
    {"shemo", "Persian", 6, 3000, 87, 4.0, 3.3},
}};

// Frozen speech encoders. layer_count() includes the convolutional
// front-end output as layer 0.
struct ModelInfo {
  std::string_view id;
  std::string_view display_name;
  std::size_t encoder_layers;
  std::string_view family;
  bool asr_finetuned;

  constexpr std::size_t layer_count() const noexcept { return encoder_layers + 1; }
};

inline constexpr std::array<ModelInfo, 8> model_catalog{{
    {"wav2vec2-base", "wav2vec2 Base", 12, "wav2vec2", false},
    {"wav2vec2-large", "wav2vec2 Large", 24, "wav2vec2", false},
    {"wav2vec2-xlsr-53", "wav2vec2 XLSR 53", 24, "xlsr", false},
    {"wav2vec2-xlsr-300m", "wav2vec2 XLSR 300M", 24, "xlsr", false},
    {"wav2vec2-asr-large", "wav2vec2 ASR Large", 24, "wav2vec2", true},
    {"hubert-base", "HuBERT Base", 12, "hubert", false},
    {"hubert-large", "HuBERT Large", 24, "hubert", false},
    {"hubert-asr-large", "HuBERT ASR Large", 24, "hubert", true},
}};

namespace detail {
inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}
}  // namespace detail

// Case-insensitive lookup; "iem4" is accepted as an alias of "iemocap".
inline std::optional<DatasetInfo> find_dataset(std::string_view id) {
  std::string key = detail::lowercase(id);
  if (key == "iem4") key = "iemocap";
  for (const auto& d : dataset_catalog)
    if (d.id == key) return d;
  return std::nullopt;
}

inline std::optional<ModelInfo> find_model(std::string_view id) {
  const std::string key = detail::lowercase(id);
  for (const auto& m : model_catalog)
    if (m.id == key || detail::lowercase(m.display_name) == key) return m;
  return std::nullopt;
}

}  // namespace probebench
