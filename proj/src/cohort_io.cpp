#include "stagecct/cohort_io.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stagecct::data {
namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

constexpr char kMagic[8] = {'S', 'C', 'C', 'T', 'D', 'A', 'T', '1'};

template <class T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is, const std::filesystem::path& file) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated file " + file.string());
  return v;
}

}  // namespace

std::string read_text(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + file.string());
}

Cohort load_csv_cohort(const std::filesystem::path& events_csv, const std::filesystem::path& labels_csv,
                       const std::filesystem::path& schema_json, std::size_t horizon) {
  Cohort cohort;
  cohort.schema = VariableSchema::from_json(nlohmann::json::parse(read_text(schema_json)));

  std::map<std::string, std::vector<Event>> events;
  {
    std::ifstream is(events_csv);
    if (!is) throw std::runtime_error("cannot open " + events_csv.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      line = strip_cr(line);
      if (line.empty() || (line_no == 1 && line.rfind("patient_id", 0) == 0)) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 4) {
        throw std::runtime_error(events_csv.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
      }
      double hour = 0;
      try {
        hour = std::stod(f[1]);
      } catch (const std::exception&) {
        throw std::runtime_error(events_csv.string() + ":" + std::to_string(line_no) + ": bad hour '" + f[1] + "'");
      }
      events[f[0]].push_back(Event{hour, f[2], f[3]});
    }
  }

  std::ifstream is(labels_csv);
  if (!is) throw std::runtime_error("cannot open " + labels_csv.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty() || (line_no == 1 && line.rfind("patient_id", 0) == 0)) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 2 || (f[1] != "0" && f[1] != "1")) {
      throw std::runtime_error(labels_csv.string() + ":" + std::to_string(line_no) + ": expected 'patient_id,0|1'");
    }
    const auto it = events.find(f[0]);
    const std::vector<Event> none;
    const auto& ev = it == events.end() ? none : it->second;
    cohort.records.push_back(discretize(f[0], ev, cohort.schema, f[1] == "1" ? 1 : 0, horizon));
  }
  return cohort;
}

void write_csv_cohort(const std::filesystem::path& dir, const VariableSchema& schema,
                      const std::vector<PatientRecord>& records) {
  std::filesystem::create_directories(dir);
  std::ostringstream ev, lb;
  ev << "patient_id,hour,variable,value\n";
  lb << "patient_id,label\n";
  for (const auto& r : records) {
    lb << r.patient_id << ',' << r.label << '\n';
    for (std::size_t t = 0; t < r.hours; ++t) {
      for (std::size_t v = 0; v < r.variables; ++v) {
        if (r.is_missing(t, v)) continue;
        ev << r.patient_id << ',' << t << ".5," << schema[v].name << ',';
        const double value = r.at(t, v);
        if (schema[v].kind == VariableKind::kCategorical) {
          ev << schema[v].vocabulary.at(static_cast<std::size_t>(value));
        } else {
          ev << format_exact(value);
        }
        ev << '\n';
      }
    }
  }
  write_text(dir / "events.csv", ev.str());
  write_text(dir / "labels.csv", lb.str());
  write_text(dir / "schema.json", schema.to_json().dump(2) + "\n");
}

void write_encoded_binary(const std::filesystem::path& file, const EncodedCohort& cohort) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(os, cohort.patient_ids.size());
  put<std::uint64_t>(os, cohort.hours);
  put<std::uint64_t>(os, cohort.width);
  for (std::size_t i = 0; i < cohort.patient_ids.size(); ++i) {
    put<std::uint64_t>(os, cohort.patient_ids[i].size());
    os.write(cohort.patient_ids[i].data(), static_cast<std::streamsize>(cohort.patient_ids[i].size()));
    put<std::int32_t>(os, cohort.labels[i]);
  }
  os.write(reinterpret_cast<const char*>(cohort.values.data()),
           static_cast<std::streamsize>(cohort.values.size() * sizeof(double)));
  if (!os) throw std::runtime_error("write failed for " + file.string());
}

EncodedCohort read_encoded_binary(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + file.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kMagic)) {
    throw std::runtime_error(file.string() + " is not an encoded cohort file");
  }
  EncodedCohort c;
  const auto n = get<std::uint64_t>(is, file);
  c.hours = get<std::uint64_t>(is, file);
  c.width = get<std::uint64_t>(is, file);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = get<std::uint64_t>(is, file);
    std::string id(len, '\0');
    if (!is.read(id.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("truncated file " + file.string());
    c.patient_ids.push_back(std::move(id));
    c.labels.push_back(get<std::int32_t>(is, file));
  }
  c.values.resize(n * c.hours * c.width);
  if (!is.read(reinterpret_cast<char*>(c.values.data()), static_cast<std::streamsize>(c.values.size() * sizeof(double)))) {
    throw std::runtime_error("truncated file " + file.string());
  }
  return c;
}

void write_encoded_csv(const std::filesystem::path& dir, const EncodedCohort& cohort) {
  std::filesystem::create_directories(dir);
  std::ostringstream lb;
  lb << "patient_id,label\n";
  const std::size_t block = cohort.hours * cohort.width;
  for (std::size_t i = 0; i < cohort.patient_ids.size(); ++i) {
    lb << cohort.patient_ids[i] << ',' << cohort.labels[i] << '\n';
    std::ostringstream m;
    for (std::size_t t = 0; t < cohort.hours; ++t) {
      for (std::size_t c = 0; c < cohort.width; ++c) {
        if (c) m << ',';
        m << format_exact(cohort.values[i * block + t * cohort.width + c]);
      }
      m << '\n';
    }
    write_text(dir / (cohort.patient_ids[i] + ".csv"), m.str());
  }
  write_text(dir / "labels.csv", lb.str());
}

}  // namespace stagecct::data
