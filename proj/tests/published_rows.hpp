#pragma once

// Per-entity P/R/F1 of the two best DPO models on the gold-standard notes,
// with the macro F1 each reports.

#include <array>

namespace published {

struct Row {
  const char* entity;
  double qwen_p, qwen_r, qwen_f1;
  double llama_p, llama_r, llama_f1;
};

inline constexpr std::array<Row, 19> kRows = {{
    {"Age", 0.819, 0.670, 0.737, 0.971, 0.632, 0.765},
    {"Race", 1.000, 0.778, 0.875, 1.000, 0.667, 0.800},
    {"Ethnicity", 0.935, 0.977, 0.956, 0.950, 0.864, 0.905},
    {"Sex", 1.000, 0.826, 0.905, 0.832, 0.667, 0.740},
    {"Perio Diagnoses", 0.954, 0.874, 0.912, 0.950, 0.685, 0.796},
    {"Stage", 0.986, 0.948, 0.966, 0.988, 0.917, 0.951},
    {"Grade", 0.987, 0.826, 0.899, 0.985, 0.912, 0.947},
    {"Extent", 0.982, 0.888, 0.933, 0.974, 0.691, 0.808},
    {"Subtype", 0.960, 0.673, 0.791, 0.985, 0.607, 0.751},
    {"Social Factors", 0.910, 0.683, 0.780, 0.981, 0.510, 0.671},
    {"HbA1c Levels", 0.981, 0.864, 0.919, 0.971, 0.576, 0.723},
    {"Systemic Condition", 0.951, 0.790, 0.863, 0.908, 0.657, 0.762},
    {"Family History Disease", 0.973, 0.667, 0.791, 0.976, 0.759, 0.854},
    {"Previous Medical Procedure", 0.945, 0.571, 0.712, 0.964, 0.505, 0.663},
    {"Medication Allergy", 1.000, 0.694, 0.820, 0.979, 0.646, 0.778},
    {"Medication Taken", 0.943, 0.843, 0.890, 0.991, 0.680, 0.807},
    {"Brushing frequency", 0.977, 0.936, 0.956, 0.991, 0.936, 0.963},
    {"Flossing", 0.814, 0.885, 0.848, 0.871, 0.749, 0.805},
    {"Other Home Care", 0.887, 0.224, 0.357, 0.763, 0.567, 0.650},
}};

inline constexpr double kQwenMacroF1 = 0.837;
inline constexpr double kLlamaMacroF1 = 0.797;
inline constexpr double kTolerance = 0.001;

}  // namespace published
