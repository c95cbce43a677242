"""Score corrections against M2 gold edits and break the result down."""

from nestedgec.corpus import parse_m2_text
from nestedgec.eval import analysis_report, classify_edit, edit_ratio, extract_edits, score_m2

gold = parse_m2_text("""S the roses are red and the violets is blue
A 6 7|||R:SPELL|||violates|||REQUIRED|||-NONE-|||0
A 7 8|||SVA|||are|||REQUIRED|||-NONE-|||0

S they are prefers tea
A 1 3|||R:VERB|||prefer|||REQUIRED|||-NONE-|||0
A 1 3|||R:VERB|||prefer|||REQUIRED|||-NONE-|||1

S this harms teh plants
A 2 3|||R:SPELL|||the|||REQUIRED|||-NONE-|||0
""")

system = [s.split() for s in ["the roses are red and the violates is blue",
                              "they prefer tea",
                              "this harm the plants"]]

for sent, out in zip(gold, system):
    for e in extract_edits(sent.source, out):
        src = e.source_text(sent.source)
        print(f"{src!r:>16} -> {e.correction!r:<12} ratio {edit_ratio(src, e.correction):.2f}"
              f"  {classify_edit(src, e.correction)}")

print()
print(score_m2(system, gold).text("corpus"))
print(analysis_report(system, gold, {"the", "roses", "are", "red", "and", "is", "blue", "they", "tea", "this"}))
