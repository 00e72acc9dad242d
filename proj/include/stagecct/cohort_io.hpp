#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stagecct/data.hpp"

namespace stagecct::data {

struct Cohort {
  VariableSchema schema;
  std::vector<PatientRecord> records;
};

// Long format `patient_id,hour,variable,value` plus `patient_id,label`, and a
// JSON schema file. Patients appear in labels-file order.
Cohort load_csv_cohort(const std::filesystem::path& events_csv, const std::filesystem::path& labels_csv,
                       const std::filesystem::path& schema_json, std::size_t horizon = 24);

// Writes events.csv, labels.csv and schema.json under `dir`. One event per
// observed cell at the middle of its hour; values round-trip exactly.
void write_csv_cohort(const std::filesystem::path& dir, const VariableSchema& schema,
                      const std::vector<PatientRecord>& records);

struct EncodedCohort {
  std::vector<std::string> patient_ids;
  std::vector<int> labels;
  std::size_t hours = 0;
  std::size_t width = 0;
  std::vector<double> values;  // patients x hours x width
};

void write_encoded_binary(const std::filesystem::path& file, const EncodedCohort& cohort);
EncodedCohort read_encoded_binary(const std::filesystem::path& file);
// One `<patient_id>.csv` matrix per patient plus labels.csv.
void write_encoded_csv(const std::filesystem::path& dir, const EncodedCohort& cohort);

std::string read_text(const std::filesystem::path& file);
void write_text(const std::filesystem::path& file, const std::string& text);

}  // namespace stagecct::data
