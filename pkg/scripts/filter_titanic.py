"""Write the age-complete Titanic passenger file bundled with relrisk.

Source: carData::TitanicSurvival (1309 passengers), as shipped by the
``rdatasets`` package. Rows with missing age are dropped.

    pip install rdatasets
    python scripts/filter_titanic.py src/relrisk/datasets/titanic.csv
"""
import csv
import sys

import rdatasets


def main(out_path):
    raw = rdatasets.data("carData", "TitanicSurvival")
    kept = raw.dropna(subset=["age"])
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "died", "male", "age", "pclass"])
        for row in kept.itertuples(index=False):
            writer.writerow([
                row.rownames,
                int(row.survived == "no"),
                int(row.sex == "male"),
                repr(round(float(row.age), 4)),
                int(row.passengerClass[0]),
            ])
    print(f"{len(raw)} passengers, {len(raw) - len(kept)} without age, wrote {len(kept)}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "titanic.csv")
