#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace anchor {

enum class Attribute : std::size_t { Topic = 0, Persona = 1, Entity = 2, Location = 3 };
inline constexpr std::size_t kAttributeCount = 4;
inline constexpr std::array<std::string_view, kAttributeCount> kAttributeNames = {"topic", "persona", "entity",
                                                                                  "location"};
inline constexpr std::array<Attribute, kAttributeCount> kAttributes = {Attribute::Topic, Attribute::Persona,
                                                                      Attribute::Entity, Attribute::Location};

/// Label used when an attribute is not detected in a text.
inline const std::string kOther = "OTHER";

inline std::size_t index_of(Attribute a) { return static_cast<std::size_t>(a); }
inline std::string_view name_of(Attribute a) { return kAttributeNames[index_of(a)]; }

struct SemanticLatent {
    std::array<std::string, kAttributeCount> values;

    const std::string& operator[](Attribute a) const { return values[index_of(a)]; }
    std::string& operator[](Attribute a) { return values[index_of(a)]; }
    bool operator==(const SemanticLatent&) const = default;
};

struct AnnotationTag {
    std::string key;
    std::string value;
    bool operator==(const AnnotationTag&) const = default;
};

using TagList = std::vector<AnnotationTag>;

}  // namespace anchor
