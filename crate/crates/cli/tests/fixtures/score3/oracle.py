"""Counting oracle for the score fixture.

Enumerates every edit script between reference and hypothesis, keeps the
cheapest under each cost model, and tallies feature errors on the unique
cheapest feature-weighted script. Writes golden.json and golden_*.tsv.

    python3 oracle.py ../../../../core/data/features.csv
"""
import json
import sys
from fractions import Fraction


def load_table(path):
    rows = [l.rstrip("\n") for l in open(path, encoding="utf-8") if l.strip() and not l.startswith("#")]
    names = rows[0].split(",")[1:]
    table = {}
    for r in rows[1:]:
        cells = r.split(",")
        table[cells[0]] = cells[1:]
    return names, table


def scripts(ref, hyp):
    """All edit scripts as lists of (ref_phone or None, hyp_phone or None)."""
    if not ref and not hyp:
        yield []
        return
    if ref and hyp:
        for rest in scripts(ref[1:], hyp[1:]):
            yield [(ref[0], hyp[0])] + rest
    if ref:
        for rest in scripts(ref[1:], hyp):
            yield [(ref[0], None)] + rest
    if hyp:
        for rest in scripts(ref, hyp[1:]):
            yield [(None, hyp[0])] + rest


def step_cost(step, table, weighted):
    r, h = step
    if r is None or h is None:
        return Fraction(1)
    if r == h:
        return Fraction(0)
    if not weighted:
        return Fraction(1)
    a, b = table[r], table[h]
    return Fraction(sum(x != y for x, y in zip(a, b)), len(a))


def read(path):
    out = []
    for line in open(path, encoding="utf-8"):
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        out.append((cols[0], cols[1], cols[2].split() if len(cols) > 2 else []))
    return out


def main():
    names, table = load_table(sys.argv[1])
    refs = read("ref.tsv")
    hyps = {u: p for u, _, p in read("hyp.tsv")}
    errors = [0] * len(names)
    specified = [0] * len(names)
    utts = []
    for utt, lang, ref in sorted(refs):
        hyp = hyps.get(utt, [])
        all_scripts = list(scripts(ref, hyp))
        pfer_costs = [sum(step_cost(s, table, True) for s in sc) for sc in all_scripts]
        per_cost = min(sum(step_cost(s, table, False) for s in sc) for sc in all_scripts)
        pfer_cost = min(pfer_costs)
        best = [sc for sc, c in zip(all_scripts, pfer_costs) if c == pfer_cost]
        assert len(best) == 1, f"{utt}: {len(best)} optimal scripts"
        for r, h in best[0]:
            if r is not None and h is not None:
                for f, (a, b) in enumerate(zip(table[r], table[h])):
                    if a != "0":
                        specified[f] += 1
                        errors[f] += a != b
            else:
                for f, v in enumerate(table[r or h]):
                    if v != "0":
                        specified[f] += 1
                        errors[f] += 1
        utts.append(dict(utt=utt, lang=lang, ref_len=len(ref), hyp_len=len(hyp), pfer_cost=pfer_cost, per_cost=per_cost))

    def group(members):
        n = sum(u["ref_len"] for u in members)
        pfer = Fraction(100) * sum(u["pfer_cost"] for u in members) / n
        per = Fraction(100) * sum(u["per_cost"] for u in members) / n
        return dict(utterances=len(members), ref_phones=n, pfer=pfer, per=per)

    groups = {"ALL": group(utts)}
    for lang in sorted({u["lang"] for u in utts}):
        groups[f"lang:{lang}"] = group([u for u in utts if u["lang"] == lang])
    groups = dict(sorted(groups.items()))

    def prop(f):
        return Fraction(errors[f], specified[f]) if specified[f] else Fraction(0)

    golden = {
        "groups": {k: {**g, "pfer": float(g["pfer"]), "per": float(g["per"]),
                       "pfer_exact": str(g["pfer"]), "per_exact": str(g["per"])} for k, g in groups.items()},
        "utterances": [{**u, "pfer": float(100 * u["pfer_cost"] / u["ref_len"]),
                        "per": float(100 * u["per_cost"] / u["ref_len"]),
                        "pfer_cost": float(u["pfer_cost"]), "per_cost": float(u["per_cost"])} for u in utts],
        "features": {n: {"errors": errors[f], "specified": specified[f], "proportion": float(prop(f)),
                         "proportion_exact": str(prop(f))} for f, n in enumerate(names)},
    }
    with open("golden.json", "w", encoding="utf-8") as fh:
        json.dump(golden, fh, indent=2, ensure_ascii=False)
        fh.write("\n")

    def p1(x):
        return f"{float(x):.1f}"

    def p4(x):
        return f"{float(x):.4f}"

    lines = ["group\tutterances\tref_phones\tpfer\tper"]
    lines += [f"{k}\t{g['utterances']}\t{g['ref_phones']}\t{p1(g['pfer'])}\t{p1(g['per'])}" for k, g in groups.items()]
    lines += ["", "utt_id\tlang\tref_len\thyp_len\tpfer\tper"]
    lines += [f"{u['utt']}\t{u['lang']}\t{u['ref_len']}\t{u['hyp_len']}\t"
              f"{p1(100 * u['pfer_cost'] / u['ref_len'])}\t{p1(100 * u['per_cost'] / u['ref_len'])}" for u in utts]
    lines += ["", "feature\tproportion"]
    lines += [f"{n}\t{p4(prop(f))}" for f, n in enumerate(names)]
    open("golden_score.tsv", "w", encoding="utf-8").write("\n".join(lines) + "\n")

    lines = ["feature\terrors\tspecified\tproportion"]
    lines += [f"{n}\t{errors[f]}\t{specified[f]}\t{p4(prop(f))}" for f, n in enumerate(names)]
    open("golden_features.tsv", "w", encoding="utf-8").write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
